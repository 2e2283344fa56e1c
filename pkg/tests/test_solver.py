from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbpose import geometry as geo
from rgbpose.geometry import Intrinsics
from rgbpose.solver import (RansacConfig, p3p_grunert, pnp_minimal, ransac_pnp, refine_pose,
                            reprojection_errors)

K = Intrinsics(500.0, 500.0, 32.0, 32.0)


def _scene(rng, n=40):
    R = geo.random_rotation(rng)
    t = np.array([*rng.uniform(-0.05, 0.05, 2), rng.uniform(0.8, 1.5)])
    P = rng.uniform(-0.1, 0.1, (n, 3))
    return R, t, P, geo.project(P @ R.T + t, K)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_p3p_contains_true_pose(seed):
    rng = np.random.default_rng(seed)
    R, t, P, uv = _scene(rng, 4)
    sols = p3p_grunert(uv[:3], P[:3], K)
    assert 1 <= len(sols) <= 4
    best = min(sols, key=lambda s: np.abs(s[0] - R).max() + np.abs(s[1] - t).max())
    np.testing.assert_allclose(best[0], R, atol=1e-5)
    top = pnp_minimal(uv, P, K)[0]
    np.testing.assert_allclose(top[0], R, atol=1e-9)
    np.testing.assert_allclose(top[1], t, atol=1e-9)


def test_ransac_noise_free_exact():
    rng = np.random.default_rng(3)
    R, t, P, uv = _scene(rng)
    res = ransac_pnp(uv, P, K, RansacConfig(seed=1))
    assert res.success and res.num_inliers == len(P)
    assert geo.rotation_angle(res.R @ R.T) <= 1e-6
    assert np.linalg.norm(res.t - t) <= 1e-8


def test_ransac_rejects_outliers_and_is_deterministic():
    rng = np.random.default_rng(4)
    R, t, P, uv = _scene(rng, 60)
    bad = rng.choice(60, 18, replace=False)
    uv = uv + rng.normal(0, 0.5, uv.shape)
    uv[bad] = rng.uniform(0, 64, (18, 2))
    cfg = RansacConfig(seed=9, inlier_threshold_px=2.0)
    a, b = ransac_pnp(uv, P, K, cfg), ransac_pnp(uv, P, K, cfg)
    assert a.success
    np.testing.assert_array_equal(a.R, b.R)
    np.testing.assert_array_equal(a.inlier_flags, b.inlier_flags)
    assert geo.rotation_error_deg(a.R, R) < 2.0
    assert abs(a.t[2] - t[2]) / t[2] < 0.01
    assert not a.inlier_flags[bad].any() or a.inlier_flags[bad].mean() < 0.2


def test_ransac_input_order_does_not_matter():
    rng = np.random.default_rng(5)
    R, t, P, uv = _scene(rng, 30)
    uv[:5] += 20.0
    perm = rng.permutation(30)
    cfg = RansacConfig(seed=2)
    a, b = ransac_pnp(uv, P, K, cfg), ransac_pnp(uv[perm], P[perm], K, cfg)
    np.testing.assert_array_equal(a.R, b.R)
    np.testing.assert_array_equal(a.inlier_flags[perm], b.inlier_flags)


def test_too_few_correspondences_fail_without_raising():
    rng = np.random.default_rng(6)
    _, _, P, uv = _scene(rng, 5)
    res = ransac_pnp(uv, P, K)
    assert not res.success and res.num_inliers == 0 and np.isinf(res.reproj_rmse)


def test_nonfinite_input_fails():
    rng = np.random.default_rng(7)
    _, _, P, uv = _scene(rng, 10)
    uv[0, 0] = np.nan
    assert not ransac_pnp(uv, P, K).success


def test_refine_pose_cost_never_increases():
    rng = np.random.default_rng(8)
    R, t, P, uv = _scene(rng, 25)
    uv = uv + rng.normal(0, 0.3, uv.shape)
    R0 = geo.axis_angle_to_matrix([0.03, -0.02, 0.01]) @ R
    R1, t1, costs = refine_pose(R0, t + 0.01, uv, P, K, return_costs=True)
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert costs[-1] < costs[0]
    assert reprojection_errors(R1, t1, uv, P, K).mean() < 1.0


def test_ransac_config_validation():
    with pytest.raises(ValueError):
        RansacConfig(inlier_threshold_px=0)
    with pytest.raises(ValueError):
        RansacConfig(confidence=1.0)
    assert RansacConfig(min_inliers=2).min_inliers == 4


def test_coplanar_square_is_solvable():
    R = geo.axis_angle_to_matrix([0.2, -0.3, 0.1])
    t = np.array([0.01, -0.02, 1.0])
    P = np.array([[-0.05, -0.05, 0.0], [0.05, -0.05, 0.0], [0.05, 0.05, 0.0], [-0.05, 0.05, 0.0]])
    uv = geo.project(P @ R.T + t, K)
    best = pnp_minimal(uv, P, K)[0]
    assert geo.rotation_angle(best[0] @ R.T) <= 1e-6
    assert np.linalg.norm(best[1] - t) <= 1e-8


def test_collinear_points_give_no_candidates():
    P = np.array([[0.0, 0, 0], [0.05, 0, 0], [0.1, 0, 0], [0.0, 0.05, 0.0]])
    uv = geo.project(P + [0, 0, 1.0], K)
    assert pnp_minimal(uv, P, K) == []


def test_all_outliers_fail_gracefully():
    rng = np.random.default_rng(10)
    P = rng.uniform(-0.1, 0.1, (50, 3))
    uv = rng.uniform(0, 64, (50, 2))
    res = ransac_pnp(uv, P, K, RansacConfig(seed=0, min_inliers=20))
    assert not res.success


def test_refine_fixed_point_and_convergence():
    rng = np.random.default_rng(11)
    R, t, P, uv = _scene(rng, 40)
    R1, t1, costs = refine_pose(R, t, uv, P, K, return_costs=True)
    assert costs[-1] <= 1e-12
    assert np.abs(R1 - R).max() <= 1e-10 and np.abs(t1 - t).max() <= 1e-10
    R0 = geo.rotation_about([1, 2, 3], np.radians(5)) @ R
    R2, t2 = refine_pose(R0, t + [0.05, 0, 0], uv, P, K, iterations=30)
    assert geo.rotation_angle(R2 @ R.T) <= 1e-6 and np.abs(t2 - t).max() <= 1e-6


def test_refinement_never_raises_rmse():
    rng = np.random.default_rng(12)
    R, t, P, uv = _scene(rng, 40)
    uv = uv + rng.normal(0, 1.0, uv.shape)
    R0 = geo.rotation_about([0, 1, 0], 0.02) @ R
    before = np.sqrt(np.mean(reprojection_errors(R0, t, uv, P, K) ** 2))
    R1, t1 = refine_pose(R0, t, uv, P, K)
    assert np.sqrt(np.mean(reprojection_errors(R1, t1, uv, P, K) ** 2)) <= before


def test_camera_rotation_equivariance():
    rng = np.random.default_rng(13)
    R, t, P, uv = _scene(rng, 30)
    Q = geo.rotation_about([0.1, 0.2, 1.0], 0.05)
    # rotating the camera frame by Q moves image points through the homography K Q K^-1
    X = (P @ R.T + t) @ Q.T
    uv_q = geo.project(X, K)
    a = ransac_pnp(uv, P, K, RansacConfig(seed=3))
    b = ransac_pnp(uv_q, P, K, RansacConfig(seed=3))
    np.testing.assert_allclose(b.R, Q @ a.R, atol=1e-8)
    np.testing.assert_allclose(b.t, Q @ a.t, atol=1e-8)

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rgbpose import losses
from rgbpose.errors import ConfigError, DimensionError

pos = st.floats(0.01, 10.0)
any_f = st.floats(-10, 10)


@given(pos, pos)
def test_relative_scale(s, s_b):
    assert losses.relative_scale(s, s_b) == pytest.approx((s - s_b) / s_b, rel=1e-12)


def test_relative_scale_rejects_non_positive_benchmark():
    with pytest.raises(ConfigError):
        losses.relative_scale(0.2, 0.0)


@given(any_f, pos, pos)
def test_scale_loss_l1_and_l2(ds, s, s_b):
    err = ds - (s - s_b) / s_b
    assert losses.scale_loss(np.array([[ds]]), s, s_b).item() == pytest.approx(abs(err), rel=1e-12, abs=1e-12)
    assert losses.scale_loss(np.array([[ds]]), s, s_b, "l2").item() == pytest.approx(err * err, rel=1e-12, abs=1e-12)


def test_scale_loss_vectorized():
    ds = np.array([[0.1], [0.2]])
    got = losses.scale_loss(ds, np.array([[0.3], [0.2]]), np.array([[0.2], [0.25]])).item()
    assert got == pytest.approx((abs(0.1 - 0.5) + abs(0.2 + 0.2)) / 2)


@given(any_f, any_f, any_f)
def test_total_is_weighted_sum(a, b, c):
    br = losses.total_loss(a, b, c, 0.5)
    assert br.total.item() == pytest.approx(1.0 * a + 0.1 * b + 100.0 * c + 0.5, rel=1e-12, abs=1e-10)
    assert br.weights == (1.0, 0.1, 100.0)
    br0 = losses.total_loss(a, b, c, weights=(1.0, 0.1, 0.0))
    assert br0.total.item() == pytest.approx(a + 0.1 * b, rel=1e-12, abs=1e-12)


def test_total_rejects_negative_weights():
    with pytest.raises(ConfigError):
        losses.total_loss(1, 1, 1, weights=(1, -0.1, 1))


def test_corr_loss_perfect_prediction_leaves_regularizers(rng):
    gt = rng.uniform(-0.5, 0.5, (4, 3))
    logits = np.zeros((4, 5))
    D = np.full((5, 3), 0.1)
    main, reg = losses.corr_loss(gt, gt, logits, D, 0.1, 1e-3, 1e-2)
    assert main.item() == 0.0
    assert reg.item() == pytest.approx(1e-3 * np.log(5) + 1e-2 * 0.03)
    with pytest.raises(DimensionError):
        losses.corr_loss(gt[:3], gt, logits, D)


def test_guidance_loss_is_mse(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert losses.guidance_loss(a, b).item() == pytest.approx(np.mean((a - b) ** 2))


def test_direct_scale_loss():
    assert losses.direct_scale_loss(np.array([[0.3]]), 0.25).item() == pytest.approx(0.05)


def test_scale_loss_examples():
    from rgbpose import diffmath as dm
    assert losses.scale_loss(np.array([[0.25]]), 0.25, 0.2).item() == pytest.approx(0.0, abs=1e-15)
    assert losses.scale_loss(np.array([[0.0]]), 0.25, 0.2).item() == pytest.approx(0.25, abs=1e-15)
    for ds, sign in ((0.5, 1.0), (-0.3, -1.0)):
        x = dm.Tensor(np.array([[ds]]), requires_grad=True)
        with dm.Tape() as tape:
            loss = losses.scale_loss(x, 0.25, 0.2)
        tape.backward(loss)
        assert np.sign(x.grad.item()) == sign


def test_corr_loss_examples():
    gt = np.random.default_rng(0).uniform(-0.5, 0.5, (3, 3))
    one_hot_logits = np.where(np.eye(3, 4) > 0, 800.0, -800.0)
    main, reg = losses.corr_loss(gt, gt, one_hot_logits, np.zeros((4, 3)))
    assert main.item() + reg.item() == 0.0
    _, reg = losses.corr_loss(gt, gt, np.zeros((3, 4)), np.zeros((4, 3)), w_entropy=1.0, w_deform=0.0)
    assert reg.item() == pytest.approx(np.log(4), abs=1e-12)


def test_guidance_loss_examples(rng):
    F = rng.normal(size=(3, 4))
    assert losses.guidance_loss(F, F).item() == 0.0
    G = F.copy()
    G[1, 2] += 1.0
    assert losses.guidance_loss(F, G).item() == pytest.approx(1 / 12)
    with pytest.raises(DimensionError):
        losses.guidance_loss(F, F[:2])


def test_total_examples_and_linearity():
    assert losses.total_loss(0.0, 0.0, 0.0).total.item() == 0.0
    assert losses.total_loss(1.0, 1.0, 1.0).total.item() == pytest.approx(101.1, abs=1e-12)
    parts = (0.3, 0.7, 0.02)
    for k in range(3):
        vals = []
        for lam in (0.0, 1.0, 2.0):
            w = [1.0, 0.1, 100.0]
            w[k] = lam
            vals.append(losses.total_loss(*parts, weights=tuple(w)).total.item())
        assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], abs=1e-12)
        assert vals[1] - vals[0] == pytest.approx(parts[k], abs=1e-12)


def test_chamfer_hand_example():
    # forward: nearest target is (1,0,0) -> 1; backward: targets at squared distances 1 and 4 -> 2.5
    val = losses.chamfer_loss(np.zeros((1, 3)), np.array([[1.0, 0, 0], [0, 2.0, 0]]))
    assert val.item() == pytest.approx(3.5, abs=1e-12)


@given(st.integers(1, 20), st.integers(0, 10_000))
def test_chamfer_zero_on_identical_sets_and_permutation_invariant(n, seed):
    pts = np.random.default_rng(seed).uniform(-1, 1, (n, 3))
    assert losses.chamfer_loss(pts, pts).item() == 0.0
    other = np.random.default_rng(seed + 1).uniform(-1, 1, (n + 2, 3))
    perm = np.random.default_rng(seed + 2).permutation(n + 2)
    assert losses.chamfer_loss(pts, other).item() == pytest.approx(losses.chamfer_loss(pts, other[perm]).item(),
                                                                   rel=1e-12)


def test_chamfer_rejects_empty():
    with pytest.raises(DimensionError):
        losses.chamfer_loss(np.zeros((0, 3)), np.zeros((4, 3)))

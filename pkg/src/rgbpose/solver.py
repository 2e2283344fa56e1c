"""RANSAC perspective-n-point: Grunert P3P hypotheses, Gauss-Newton refinement.

The 3D points handed to :func:`ransac_pnp` are already metric (the predicted
NOCS points multiplied by the predicted scale); PnP never estimates scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, axis_angle_to_matrix

MIN_CORRESPONDENCES = 6


@dataclass
class RansacConfig:
    max_iterations: int = 500
    inlier_threshold_px: float = 1.0
    confidence: float = 0.999
    min_inliers: int = 6
    refine_iterations: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.inlier_threshold_px > 0:
            raise ValueError("inlier_threshold_px must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iterations < 1 or self.refine_iterations < 0:
            raise ValueError("iteration counts must be non-negative (max_iterations >= 1)")
        self.min_inliers = max(4, int(self.min_inliers))


@dataclass
class PnPResult:
    R: np.ndarray
    t: np.ndarray
    inlier_flags: np.ndarray
    reproj_rmse: float
    iterations_used: int
    success: bool = True
    cost_history: list = field(default_factory=list, repr=False)

    @property
    def num_inliers(self) -> int:
        return int(np.count_nonzero(self.inlier_flags))

    @classmethod
    def failure(cls, n: int, iterations: int = 0, inliers=None) -> "PnPResult":
        flags = np.zeros(n, dtype=bool) if inliers is None else inliers
        return cls(np.eye(3), np.zeros(3), flags, float("inf"), iterations, success=False)


def bearings(pixels: np.ndarray, K: Intrinsics) -> np.ndarray:
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    rays = np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))], axis=1)
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def reprojection_errors(R, t, pixels, points, K: Intrinsics) -> np.ndarray:
    """Per-point pixel error; points at or behind the camera get +inf."""
    X = points @ R.T + t
    z = X[:, 2]
    err = np.full(len(points), np.inf)
    ok = z > 1e-12
    u = K.fx * X[ok, 0] / z[ok] + K.cx
    v = K.fy * X[ok, 1] / z[ok] + K.cy
    err[ok] = np.hypot(u - pixels[ok, 0], v - pixels[ok, 1])
    return err


def _rigid_fit(src: np.ndarray, dst: np.ndarray):
    mu_s, mu_d = src.mean(0), dst.mean(0)
    H = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(H)
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1.0
    R = U @ np.diag(d) @ Vt
    return R, mu_d - R @ mu_s


def _polish(coeffs: np.ndarray, x: float, steps: int = 3) -> float:
    """Newton steps on a polynomial root, kept only while |p(x)| shrinks."""
    d = np.polyder(coeffs)
    fx = abs(np.polyval(coeffs, x))
    for _ in range(steps):
        dv = np.polyval(d, x)
        if dv == 0:
            break
        x_new = x - np.polyval(coeffs, x) / dv
        f_new = abs(np.polyval(coeffs, x_new))
        if not f_new < fx:
            break
        x, fx = x_new, f_new
    return x


def _polish_depths(sv, a2, b2, c2, ca, cb, cg, steps: int = 6):
    """Newton iterations on the three law-of-cosines equations."""
    target = np.array([a2, b2, c2])
    for _ in range(steps):
        s1, s2, s3 = sv
        F = np.array([s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca,
                      s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb,
                      s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg]) - target
        if np.abs(F).max() <= 1e-15 * target.max():
            break
        J = np.array([[0.0, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca],
                      [2 * s1 - 2 * s3 * cb, 0.0, 2 * s3 - 2 * s1 * cb],
                      [2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, 0.0]])
        try:
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        sv = sv - step
    return sv


def p3p_grunert(pixels: np.ndarray, points: np.ndarray, K: Intrinsics) -> list[tuple[np.ndarray, np.ndarray]]:
    """All real (R, t) solutions for three 2D-3D pairs."""
    P = np.asarray(points, dtype=np.float64)[:3]
    j = bearings(np.asarray(pixels)[:3], K)
    a2 = float(np.sum((P[1] - P[2]) ** 2))
    b2 = float(np.sum((P[0] - P[2]) ** 2))
    c2 = float(np.sum((P[0] - P[1]) ** 2))
    scale = max(a2, b2, c2)
    area = np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0]))
    if scale <= 0 or area <= 1e-9 * scale or b2 <= 1e-12 * scale:
        return []
    ca, cb, cg = float(j[1] @ j[2]), float(j[0] @ j[2]), float(j[0] @ j[1])

    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1.0) ** 2 - 4.0 * c2 / b2 * ca * ca
    A3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb)
    A2 = 2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca
                - 4.0 * apc * ca * cb * cg + 2.0 * (b2 - a2) / b2 * cg * cg)
    A1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg)
    A0 = (1.0 + amc) ** 2 - 4.0 * a2 / b2 * cg * cg
    coeffs = np.array([A4, A3, A2, A1, A0])
    if not np.all(np.isfinite(coeffs)) or np.abs(coeffs).max() == 0:
        return []
    coeffs = coeffs / np.abs(coeffs).max()
    roots = np.roots(np.trim_zeros(coeffs, "f"))

    out = []
    for r in roots:
        if abs(r.imag) > 1e-3 * max(1.0, abs(r.real)):
            continue
        v = _polish(coeffs, float(r.real))
        if v <= 0:
            continue
        denom = 1.0 + v * v - 2.0 * v * cb
        if denom <= 0:
            continue
        s1 = math.sqrt(b2 / denom)
        s3 = v * s1
        # s2 from the c-equation; the a-equation picks the consistent root.
        # (The closed-form ratio used by Grunert is singular when
        # cos(gamma) = v cos(alpha), so it is avoided.)
        disc = (s1 * cg) ** 2 - (s1 * s1 - c2)
        if disc < -1e-3 * scale:
            continue
        root = math.sqrt(max(disc, 0.0))
        cands = []
        for s2 in (s1 * cg + root, s1 * cg - root):
            resid = abs(s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * ca - a2)
            if resid <= 1e-2 * scale:
                cands.append(s2)
        for s2 in cands:
            if s2 <= 0:
                continue
            d1, d2, d3 = _polish_depths(np.array([s1, s2, s3]), a2, b2, c2, ca, cb, cg)
            X = np.stack([d1 * j[0], d2 * j[1], d3 * j[2]])
            R, t = _rigid_fit(P, X)
            if np.abs(P @ R.T + t - X).max() > 1e-4 * math.sqrt(scale) + 1e-9:
                continue
            if any(np.abs(R - Ro).max() < 1e-6 and np.abs(t - to).max() < 1e-6 * math.sqrt(scale) for Ro, to in out):
                continue
            out.append((R, t))
    return out


def pnp_minimal(pixels: np.ndarray, points: np.ndarray, K: Intrinsics,
                polish: bool = True) -> list[tuple[np.ndarray, np.ndarray]]:
    """P3P on the first three pairs, candidates ranked by the fourth pair's error.

    Returns an empty list for degenerate input; candidates placing any of the
    four points behind the camera are dropped.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    cands = []
    for R, t in p3p_grunert(pixels, points, K):
        z = (points[:4] @ R.T + t)[:, 2]
        if np.any(z <= 0):
            continue
        if polish and len(points) >= 4:
            # near-double quartic roots lose half the digits; a short
            # Gauss-Newton pass on the four pairs restores them
            R, t = refine_pose(R, t, pixels[:4], points[:4], K, iterations=3)
        e4 = reprojection_errors(R, t, pixels[3:4], points[3:4], K)[0] if len(points) > 3 else 0.0
        cands.append((e4, R, t))
    cands.sort(key=lambda c: c[0])
    return [(R, t) for _, R, t in cands]


def _residuals(R, t, pixels, points, K):
    X = points @ R.T + t
    z = X[:, 2]
    u = K.fx * X[:, 0] / z + K.cx
    v = K.fy * X[:, 1] / z + K.cy
    return np.stack([u - pixels[:, 0], v - pixels[:, 1]], axis=1).reshape(-1), X


def refine_pose(R0, t0, pixels, points, K: Intrinsics, iterations: int = 10,
                return_costs: bool = False):
    """Gauss-Newton on squared reprojection residuals, left axis-angle updates.

    Each accepted step does not increase the cost (step halving); singular
    normal equations return the input pose unchanged.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    R, t = np.array(R0, dtype=np.float64), np.array(t0, dtype=np.float64)
    r, X = _residuals(R, t, pixels, points, K)
    cost = float(r @ r) if np.all(X[:, 2] > 0) else np.inf
    costs = [cost]
    if not np.isfinite(cost) or len(points) < 4:
        return (R, t, costs) if return_costs else (R, t)
    for _ in range(iterations):
        x, y, z = X[:, 0], X[:, 1], X[:, 2]
        n = len(points)
        dproj = np.zeros((n, 2, 3))
        dproj[:, 0, 0] = K.fx / z
        dproj[:, 0, 2] = -K.fx * x / z**2
        dproj[:, 1, 1] = K.fy / z
        dproj[:, 1, 2] = -K.fy * y / z**2
        RP = X - t
        # d(exp(w) R p)/dw at w=0 is -[R p]_x
        dX_dw = np.zeros((n, 3, 3))
        dX_dw[:, 0, 1], dX_dw[:, 0, 2] = RP[:, 2], -RP[:, 1]
        dX_dw[:, 1, 0], dX_dw[:, 1, 2] = -RP[:, 2], RP[:, 0]
        dX_dw[:, 2, 0], dX_dw[:, 2, 1] = RP[:, 1], -RP[:, 0]
        J = np.concatenate([dproj @ dX_dw, dproj], axis=2).reshape(2 * n, 6)
        JtJ = J.T @ J
        if not np.all(np.isfinite(JtJ)) or np.linalg.cond(JtJ) > 1e14:
            break
        delta = -np.linalg.solve(JtJ, J.T @ r)
        step = 1.0
        accepted = False
        for _ in range(12):
            R_new = axis_angle_to_matrix(step * delta[:3]) @ R
            t_new = t + step * delta[3:]
            r_new, X_new = _residuals(R_new, t_new, pixels, points, K)
            if np.all(X_new[:, 2] > 0):
                c_new = float(r_new @ r_new)
                if c_new <= cost:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            break
        # re-orthonormalize to stop drift
        U, _, Vt = np.linalg.svd(R_new)
        R, t, r, X = U @ Vt, t_new, r_new, X_new
        improvement = cost - c_new
        cost = c_new
        costs.append(cost)
        if improvement <= 1e-15 * max(cost, 1e-300) or np.linalg.norm(step * delta) < 1e-14:
            break
    return (R, t, costs) if return_costs else (R, t)


def _canonical_order(pixels: np.ndarray, points: np.ndarray) -> np.ndarray:
    keys = np.concatenate([pixels, points], axis=1)
    return np.lexsort(keys.T[::-1])


def ransac_pnp(pixels: np.ndarray, points: np.ndarray, K: Intrinsics,
               cfg: RansacConfig | None = None) -> PnPResult:
    """Robust pose from 2D pixel / metric 3D point correspondences.

    Failure (too few correspondences or inliers) is returned as a result with
    ``success=False``; this function does not raise on bad data.
    """
    cfg = cfg or RansacConfig()
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n < MIN_CORRESPONDENCES or not (np.all(np.isfinite(pixels)) and np.all(np.isfinite(points))):
        return PnPResult.failure(n)

    order = _canonical_order(pixels, points)
    px, pts = pixels[order], points[order]
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.inlier_threshold_px
    best = None  # (count, -err_sum, R, t, mask)
    needed = cfg.max_iterations
    it = 0
    while it < min(needed, cfg.max_iterations):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        for R, t in pnp_minimal(px[idx], pts[idx], K, polish=False):
            err = reprojection_errors(R, t, px, pts, K)
            mask = err < thr
            count = int(mask.sum())
            score = (count, -float(np.sum(err[mask])))
            if best is None or score > best[0]:
                best = (score, R, t, mask)
        if best is not None and best[0][0] > 0:
            w = best[0][0] / n
            denom = math.log(max(1.0 - w**4, 1e-300))
            needed = 0 if denom == 0 else math.ceil(math.log(1.0 - cfg.confidence) / denom)

    if best is None or best[0][0] < cfg.min_inliers:
        flags = np.zeros(n, dtype=bool)
        if best is not None:
            flags[order] = best[3]
        return PnPResult.failure(n, it, flags)

    _, R, t, mask = best
    history = []
    for _ in range(2):
        R, t, costs = refine_pose(R, t, px[mask], pts[mask], K, cfg.refine_iterations, return_costs=True)
        history.extend(costs)
        new_mask = reprojection_errors(R, t, px, pts, K) < thr
        if new_mask.sum() <= mask.sum() or np.array_equal(new_mask, mask):
            break
        mask = new_mask

    err = reprojection_errors(R, t, px[mask], pts[mask], K)
    if mask.sum() < cfg.min_inliers:
        flags = np.zeros(n, dtype=bool)
        flags[order] = mask
        return PnPResult.failure(n, it, flags)
    flags = np.zeros(n, dtype=bool)
    flags[order] = mask
    rmse = float(np.sqrt(np.mean(err**2)))
    return PnPResult(R, t, flags, rmse, it, True, history)

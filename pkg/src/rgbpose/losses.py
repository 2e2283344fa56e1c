"""Training objectives and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import Tensor, abs_, add, as_tensor, mean, mean_row_entropy, mse, mul, smooth_l1, sub, take_rows
from .errors import ConfigError, DimensionError

DEFAULT_WEIGHTS = (1.0, 0.1, 100.0)


@dataclass
class LossBreakdown:
    L_s: Tensor
    L_corr: Tensor
    L_g: Tensor
    regularizers: Tensor
    total: Tensor
    weights: tuple[float, float, float]

    def values(self) -> dict[str, float]:
        return {"total": self.total.item(), "L_s": self.L_s.item(), "L_corr": self.L_corr.item(),
                "L_g": self.L_g.item(), "reg": self.regularizers.item()}


def relative_scale(s_true, s_b):
    """Ground-truth residual (s - s_b) / s_b (scalars or matching arrays)."""
    if not np.all(np.asarray(s_b) > 0):
        raise ConfigError(f"benchmark scale must be positive, got {s_b}")
    return (s_true - s_b) / s_b


def scale_loss(delta_s, s_true, s_b, norm: str = "l1") -> Tensor:
    diff = sub(as_tensor(delta_s), relative_scale(s_true, s_b))
    return mean(abs_(diff)) if norm == "l1" else mean(mul(diff, diff))


def direct_scale_loss(s_pred, s_true, norm: str = "l1") -> Tensor:
    diff = sub(as_tensor(s_pred), np.asarray(s_true, dtype=np.float64))
    return mean(abs_(diff)) if norm == "l1" else mean(mul(diff, diff))


def corr_loss(pred_nocs, gt_nocs, logits, D, beta: float = 0.1, w_entropy: float = 1e-3,
              w_deform: float = 1e-2) -> tuple[Tensor, Tensor]:
    """(smooth-L1 correspondence term, regularizers).

    Regularizers are the mean row entropy of A (from its logits) and the mean
    squared norm of the deformation rows.
    """
    pred_nocs, gt_nocs = as_tensor(pred_nocs), as_tensor(gt_nocs)
    if pred_nocs.shape != gt_nocs.shape:
        raise DimensionError(f"corr_loss: prediction {pred_nocs.shape} vs target {gt_nocs.shape}")
    main = smooth_l1(pred_nocs, gt_nocs, beta)
    D = as_tensor(D)
    # mean over rows of ||d||^2 = 3 * mean over entries
    deform = mul(mean(mul(D, D)), float(D.shape[1]))
    reg = add(mul(mean_row_entropy(logits), w_entropy), mul(deform, w_deform))
    return main, reg


def chamfer_loss(deformed, model_points) -> Tensor:
    """Symmetric Chamfer distance: mean squared distance to the nearest point, both ways.

    Nearest neighbours are picked on the current values and held fixed for the
    backward pass, as usual for this loss.
    """
    deformed = as_tensor(deformed)
    target = np.asarray(model_points, dtype=np.float64)
    if deformed.shape[0] == 0 or target.shape[0] == 0:
        raise DimensionError("chamfer_loss: empty point set")
    d2 = ((deformed.data[:, None, :] - target[None, :, :]) ** 2).sum(-1)
    dim = float(target.shape[1])
    fwd = mul(mse(deformed, target[d2.argmin(axis=1)]), dim)
    bwd = mul(mse(take_rows(deformed, d2.argmin(axis=0)), target), dim)
    return add(fwd, bwd)


def guidance_loss(F_fuse_guid, F_N) -> Tensor:
    return mse(F_fuse_guid, F_N)


def total_loss(L_s, L_corr, L_g, regularizers=0.0,
               weights: tuple[float, float, float] = DEFAULT_WEIGHTS) -> LossBreakdown:
    l1, l2, l3 = weights
    if min(weights) < 0:
        raise ConfigError(f"loss weights must be >= 0, got {weights}")
    L_s, L_corr, L_g, reg = (as_tensor(x) for x in (L_s, L_corr, L_g, regularizers))
    total = add(add(add(mul(L_s, l1), mul(L_corr, l2)), mul(L_g, l3)), reg)
    return LossBreakdown(L_s, L_corr, L_g, reg, total, (float(l1), float(l2), float(l3)))

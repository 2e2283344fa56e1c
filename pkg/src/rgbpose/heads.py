"""Prediction heads: assignment A, deformation D, scale residual, and correspondence assembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import (Params, RowGroups, Tensor, add, as_tensor, avgpool_rows, broadcast_rows, clamp,
                       concat_cols, matmul, mlp_forward, mul, softmax_rows)

DELTA_S_RANGE = (-0.9, 4.0)


@dataclass
class Correspondences:
    pixels: np.ndarray  # [N_o x 2]
    nocs: Tensor        # [N_o x 3]
    metric: Tensor      # [N_o x 3]


@dataclass
class ScaleOutput:
    raw: Tensor        # [B x 1] head output before clamping
    delta_s: Tensor    # [B x 1], clamped residual (residual mode) or raw (direct mode)
    s: np.ndarray      # [B] positive metric scale used downstream


def _widths(d_in: int, hidden: int, depth: int, d_out: int) -> list[int]:
    return [d_in] + [hidden] * depth + [d_out]


def add_heads(params: Params, d: int, hidden: int, depth: int, n_prior: int, rng: np.random.Generator,
              cue_dim: int = 0) -> None:
    params.add_mlp("head.assign", _widths(3 * d, hidden, depth, n_prior), rng, zero_last=True)
    params.add_mlp("head.deform", _widths(2 * d, hidden, depth, 3), rng, zero_last=True)
    params.add_mlp("head.scale", _widths(3 * d + cue_dim, hidden, depth, 1), rng, zero_last=True)


def assignment_logits(F_ins, F_fuse, params: Params) -> Tensor:
    return mlp_forward(concat_cols(as_tensor(F_ins), as_tensor(F_fuse)), params.mlp("head.assign"))


def predict_assignment(F_ins, F_fuse, params: Params) -> tuple[Tensor, Tensor]:
    """Row-stochastic A [N_o x N_r] and its logits."""
    logits = assignment_logits(F_ins, F_fuse, params)
    return softmax_rows(logits), logits


def _pool(x, groups: RowGroups | None) -> Tensor:
    return avgpool_rows(as_tensor(x)) if groups is None else groups.pool(as_tensor(x))


def predict_deformation(F_cat, F_fuse, params: Params, groups: RowGroups | None = None,
                        cat_groups: RowGroups | None = None) -> Tensor:
    """Offsets D for the prior points; with groups, F_cat holds one prior block per sample."""
    F_cat = as_tensor(F_cat)
    pooled = _pool(F_fuse, groups)
    if cat_groups is None or cat_groups.n_groups == 1:
        pooled = broadcast_rows(pooled, F_cat.shape[0])
    else:
        pooled = cat_groups.spread(pooled)
    return mlp_forward(concat_cols(F_cat, pooled), params.mlp("head.deform"))


def scale_from_residual(s_b, delta_s):
    return s_b + s_b * delta_s


def predict_scale(F_ins, F_fuse, s_b, params: Params, mode: str = "residual",
                  cue: np.ndarray | None = None, groups: RowGroups | None = None) -> ScaleOutput:
    """Residual mode: s = s_b (1 + dS) with dS clamped.  Direct mode regresses s itself.

    ``s_b`` is a scalar or one value per group; ``cue`` holds fixed per-sample
    inputs (one row per group) appended to the pooled features.
    """
    s_b = np.atleast_1d(np.asarray(s_b, dtype=np.float64))
    if not np.all(s_b > 0):
        raise ValueError(f"benchmark scale must be positive, got {s_b}")
    pooled = concat_cols(_pool(F_ins, groups), _pool(F_fuse, groups))
    if cue is not None:
        pooled = concat_cols(pooled, np.asarray(cue, dtype=np.float64).reshape(pooled.shape[0], -1))
    raw = mlp_forward(pooled, params.mlp("head.scale"))
    if mode == "direct":
        # no benchmark: the head output is the metric scale; keep it positive for PnP
        return ScaleOutput(raw, raw, np.maximum(raw.data[:, 0], 1e-3))
    ds = clamp(raw, *DELTA_S_RANGE)
    return ScaleOutput(raw, ds, scale_from_residual(s_b, ds.data[:, 0]))


def assemble_correspondences(A, D, prior: np.ndarray, s: float, pixel_centers: np.ndarray) -> Correspondences:
    deformed = add(Tensor(prior), as_tensor(D))
    nocs = matmul(as_tensor(A), deformed)
    return Correspondences(np.asarray(pixel_centers, dtype=np.float64), nocs, mul(nocs, float(s)))

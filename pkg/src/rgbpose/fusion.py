"""Attention fusion of RGB, geometric and category-prior features.

All attention is single-head with d_k = d.  Self-attention keeps the input as
residual; cross-attention keeps the projected query as residual.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffmath import (Layer, Params, RowGroups, Tensor, as_tensor, avgpool_rows, broadcast_rows,
                       concat_cols, concat_rows, grouped_attention, matmul, mlp_forward, mul, softmax_rows,
                       take_rows, transpose)
from .errors import DimensionError, EmptyInstanceError


@dataclass
class QKV:
    q: list[Layer]
    k: list[Layer]
    v: list[Layer]


@dataclass
class FusionBundle:
    F_ins: Tensor        # [N_o x 2d]
    F_cat: Tensor        # [N_r x d]
    F_fuse: Tensor       # [N_o x d]
    F_fuse_guid: Tensor  # [N_o x 2d]


def add_qkv(params: Params, prefix: str, d: int, depth: int, rng: np.random.Generator) -> None:
    # value projector starts at zero: each block begins as its residual path
    widths = [d] * (depth + 1)
    for part in "qkv":
        params.add_mlp(f"{prefix}.{part}", widths, rng, zero_last=(part == "v"))


def qkv(params: Params, prefix: str) -> QKV:
    return QKV(params.mlp(f"{prefix}.q"), params.mlp(f"{prefix}.k"), params.mlp(f"{prefix}.v"))


@dataclass
class CategoryBank:
    """Category features of a batch stacked by category, plus each sample's owner block."""
    feats: Tensor         # [U*N_r x d]
    groups: RowGroups     # one block per distinct category
    owner: np.ndarray     # sample -> block index

    @classmethod
    def single(cls, F_cat) -> "CategoryBank":
        F_cat = as_tensor(F_cat)
        return cls(F_cat, RowGroups([F_cat.shape[0]]), np.zeros(1, dtype=np.intp))

    @classmethod
    def stack(cls, blocks: list[Tensor], owner) -> "CategoryBank":
        feats = blocks[0] if len(blocks) == 1 else concat_rows(*blocks)
        return cls(feats, RowGroups([b.shape[0] for b in blocks]), np.asarray(owner, dtype=np.intp))

    def per_sample(self) -> tuple[Tensor, RowGroups]:
        """Each sample's block repeated in sample order, [B*N_r x d]."""
        if self.groups.n_groups == 1 and self.owner.size == 1:
            return self.feats, self.groups
        idx = np.concatenate([self.groups.rows(u) for u in self.owner])
        return take_rows(self.feats, idx), RowGroups(self.groups.counts[self.owner])


@dataclass
class Routing:
    """Which key block each query group attends; ``None`` fields mean one shared block."""
    q_groups: RowGroups
    k_groups: RowGroups | None = None
    owner: np.ndarray | None = None

    @property
    def trivial(self) -> bool:
        k = self.k_groups or self.q_groups
        return k.n_groups == 1


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v; returns (output, weights)."""
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    logits = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    w = softmax_rows(logits)
    return matmul(w, v), w


def _attend(q: Tensor, k: Tensor, v: Tensor, routing: Routing | None) -> Tensor:
    if routing is None or routing.trivial:
        return attention(q, k, v)[0]
    return grouped_attention(q, k, v, routing.q_groups, routing.k_groups, routing.owner)


def self_attend(F, proj: QKV, groups: RowGroups | None = None) -> Tensor:
    F = as_tensor(F)
    routing = Routing(groups) if groups is not None else None
    out = _attend(mlp_forward(F, proj.q), mlp_forward(F, proj.k), mlp_forward(F, proj.v), routing)
    return out + F


def cross_attend(F_q, F_kv, q_layers: list[Layer], k_layers: list[Layer], v_layers: list[Layer],
                 routing: Routing | None = None) -> Tensor:
    """Queries projected from ``F_q``; keys and values projected from ``F_kv``."""
    q = mlp_forward(as_tensor(F_q), q_layers)
    F_kv = as_tensor(F_kv)
    out = _attend(q, mlp_forward(F_kv, k_layers), mlp_forward(F_kv, v_layers), routing)
    return out + q


def add_fusion(params: Params, d: int, depth: int, rng: np.random.Generator, variant: str = "attention") -> None:
    add_qkv(params, "sa.rgb", d, depth, rng)
    add_qkv(params, "sa.g", d, depth, rng)
    add_qkv(params, "sa.prior", d, depth, rng)
    params.add_mlp("reduce", [2 * d, d, d], rng)
    if variant == "attention":
        add_qkv(params, "ca.rgb", d, depth, rng)
        add_qkv(params, "ca.g", d, depth, rng)
        widths = [d] * (depth + 1)
        params.add_mlp("ca.ins.q", widths, rng)
        params.add_mlp("ca.cat.k", widths, rng)
        params.add_mlp("ca.cat.v", widths, rng, zero_last=True)
    else:
        params.add_mlp("concat.fuse", [2 * d, d, d], rng)


def fuse_instance(F_rgb, F_g, params: Params, variant: str = "attention",
                  groups: RowGroups | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Self-attend each stream, then (bidirectional) cross-attend and concatenate.

    Inputs hold only the foreground tokens.  The concat variant skips the
    cross-attention and concatenates the self-attended streams.
    """
    F_rgb, F_g = as_tensor(F_rgb), as_tensor(F_g)
    if F_rgb.shape[0] == 0:
        raise EmptyInstanceError("no foreground tokens")
    if F_rgb.shape != F_g.shape:
        raise DimensionError(f"token streams differ: {F_rgb.shape} vs {F_g.shape}")
    s_rgb = self_attend(F_rgb, qkv(params, "sa.rgb"), groups)
    s_g = self_attend(F_g, qkv(params, "sa.g"), groups)
    if variant != "attention":
        return s_rgb, s_g, concat_cols(s_rgb, s_g)
    routing = Routing(groups) if groups is not None else None
    c_rgb_p, c_g_p = qkv(params, "ca.rgb"), qkv(params, "ca.g")
    c_rgb = cross_attend(s_rgb, s_g, c_rgb_p.q, c_g_p.k, c_g_p.v, routing)
    c_g = cross_attend(s_g, s_rgb, c_g_p.q, c_rgb_p.k, c_rgb_p.v, routing)
    return c_rgb, c_g, concat_cols(c_rgb, c_g)


def category_features(F_prior, params: Params) -> Tensor:
    return self_attend(F_prior, qkv(params, "sa.prior"))


def fuse_with_category(F_ins, F_cat, params: Params, variant: str = "attention",
                       groups: RowGroups | None = None) -> Tensor:
    """Instance tokens attend to their category's prior features.

    ``F_cat`` is a [N_r x d] matrix for one sample, or a :class:`CategoryBank`
    when ``groups`` splits ``F_ins`` into several samples.
    """
    reduced = mlp_forward(as_tensor(F_ins), params.mlp("reduce"))
    bank = F_cat if isinstance(F_cat, CategoryBank) else CategoryBank.single(F_cat)
    groups = groups or RowGroups([reduced.shape[0]])
    if groups.n_groups != bank.owner.size:
        raise DimensionError(f"{groups.n_groups} token groups but {bank.owner.size} category owners")
    if variant != "attention":
        pooled = bank.groups.pool(bank.feats)
        if bank.owner.size > 1:
            pooled = take_rows(pooled, bank.owner)
        pooled = groups.spread(pooled)
        return mlp_forward(concat_cols(reduced, pooled), params.mlp("concat.fuse"))
    return cross_attend(reduced, bank.feats, params.mlp("ca.ins.q"), params.mlp("ca.cat.k"),
                        params.mlp("ca.cat.v"), Routing(groups, bank.groups, bank.owner))


def build_guidance_feature(F_fuse, groups: RowGroups | None = None) -> Tensor:
    F_fuse = as_tensor(F_fuse)
    if groups is None or groups.n_groups == 1:
        return concat_cols(F_fuse, broadcast_rows(avgpool_rows(F_fuse), F_fuse.shape[0]))
    return concat_cols(F_fuse, groups.spread(groups.pool(F_fuse)))

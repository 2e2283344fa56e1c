"""Feature extractors.

* ``embed_patches``: frozen random linear patch projector plus fixed 2D
  sinusoidal positions (stands in for a frozen pretrained image backbone).
* ``geom_head``: trainable per-token MLP producing geometric features F_g.
* ``silhouette_descriptor``: fixed shape statistics of the instance mask,
  a scale cue for the scale head.
* ``encode_points``: single-scale PointNet-style encoder (per-point MLP, global
  max-pool, concat, second MLP).  Used trainable for the category prior and
  frozen for the NOCS guidance target F_N.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import Params, Tensor, broadcast_rows, concat_cols, maxpool_rows, mlp_forward
from .errors import ConfigError, DimensionError


@dataclass
class PatchGrid:
    tokens: Tensor            # [N_p x d]
    pixel_centers: np.ndarray  # [N_p x 2] (u, v)
    fg_flags: np.ndarray       # [N_p] bool
    center_in_mask: np.ndarray  # [N_p] bool, center pixel itself is foreground
    patch: int

    @property
    def observed(self) -> np.ndarray:
        """Indices of tokens used as observed points."""
        return np.nonzero(self.fg_flags & self.center_in_mask)[0]


@dataclass
class PointFeatures:
    feats: Tensor       # [N x d]
    points: np.ndarray  # [N x 3]


def positional_encoding(rows: int, cols: int, d: int) -> np.ndarray:
    """Fixed 2D sinusoidal encoding; half the channels for rows, half for columns."""
    if d % 4:
        raise ConfigError(f"d_model must be divisible by 4 for 2D positions, got {d}")
    q = d // 4
    freqs = 1.0 / (100.0 ** (np.arange(q) / q))
    r = np.arange(rows)[:, None] * freqs[None, :]
    c = np.arange(cols)[:, None] * freqs[None, :]
    pe_r = np.concatenate([np.sin(r), np.cos(r)], axis=1)
    pe_c = np.concatenate([np.sin(c), np.cos(c)], axis=1)
    out = np.concatenate([np.repeat(pe_r, cols, axis=0), np.tile(pe_c, (rows, 1))], axis=1)
    return out


def add_embedder(params: Params, patch: int, d: int, rng: np.random.Generator) -> None:
    fan_in = patch * patch * 3
    params.add("embed.w", rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, d)), frozen=True)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """[H x W x 3] -> [N_p x p*p*3], patches in row-major grid order."""
    H, W = image.shape[:2]
    if H % patch or W % patch:
        raise ConfigError(f"patch size {patch} does not divide image size {H}x{W}")
    gh, gw = H // patch, W // patch
    x = image.reshape(gh, patch, gw, patch, -1).transpose(0, 2, 1, 3, 4)
    return x.reshape(gh * gw, -1)


def embed_patches(image: np.ndarray, mask: np.ndarray, params: Params, patch: int) -> PatchGrid:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"image must be [H x W x 3], got {image.shape}")
    H, W = image.shape[:2]
    flat = patchify(image, patch)
    w = params["embed.w"]
    if w.shape[0] != flat.shape[1]:
        raise ConfigError(f"embedder expects {w.shape[0]} inputs per patch, image gives {flat.shape[1]}")
    gh, gw = H // patch, W // patch
    tokens = flat @ w.data + positional_encoding(gh, gw, w.shape[1])
    centers, fg, center_in = token_layout(mask, patch)
    return PatchGrid(tokens=Tensor(tokens), pixel_centers=centers, fg_flags=fg,
                     center_in_mask=center_in, patch=patch)


def token_layout(mask: np.ndarray, patch: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(pixel centers [N_p x 2], foreground flags, center-pixel-in-mask flags)."""
    m = np.asarray(mask, dtype=bool)
    H, W = m.shape
    if H % patch or W % patch:
        raise ConfigError(f"patch size {patch} does not divide image size {H}x{W}")
    gh, gw = H // patch, W // patch
    a, b = np.divmod(np.arange(gh * gw), gw)
    cu = b * patch + patch // 2
    cv = a * patch + patch // 2
    coverage = patchify(m[:, :, None].astype(np.float64), patch).mean(axis=1)
    centers = np.stack([cu, cv], axis=1).astype(np.float64)
    return centers, coverage >= 0.5, m[cv, cu]


def observed_tokens(mask: np.ndarray, patch: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and pixel centers of observed tokens (foreground with a foreground center pixel)."""
    centers, fg, center_in = token_layout(mask, patch)
    idx = np.nonzero(fg & center_in)[0]
    return idx, centers[idx]


SILHOUETTE_DIM = 6


def silhouette_descriptor(mask: np.ndarray) -> np.ndarray:
    """Resolution-free mask statistics: fill fraction, second-moment eigenvalues
    (x12, so a full square gives 1), their ratio, and bounding-box width and height.

    An empty mask gives zeros.
    """
    m = np.asarray(mask, dtype=bool)
    H, W = m.shape
    vs, us = np.nonzero(m)
    if us.size == 0:
        return np.zeros(SILHOUETTE_DIM)
    xy = np.stack([us / W, vs / H])
    cov = np.cov(xy) if us.size > 1 else np.zeros((2, 2))
    lo, hi = np.linalg.eigvalsh(cov)
    return np.array([m.mean(), 12.0 * lo, 12.0 * hi, lo / hi if hi > 0 else 1.0,
                     (us.max() - us.min() + 1) / W, (vs.max() - vs.min() + 1) / H])


def add_geom_head(params: Params, d: int, rng: np.random.Generator) -> None:
    params.add_mlp("geom", [d, d, d], rng, zero_last=True)


def geom_head(tokens, params: Params) -> Tensor:
    return mlp_forward(tokens, params.mlp("geom"))


def add_point_encoder(params: Params, prefix: str, d_hidden: int, d_out: int,
                      rng: np.random.Generator, frozen: bool = False) -> None:
    params.add_mlp(f"{prefix}.local", [3, d_hidden, d_hidden], rng, frozen=frozen)
    params.add_mlp(f"{prefix}.global", [2 * d_hidden, d_out, d_out], rng, frozen=frozen)


def encode_points(points: np.ndarray, params: Params, prefix: str, frozen: bool = False) -> PointFeatures:
    """Per-point features; permutation-equivariant in the rows of ``points``."""
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3 or P.shape[0] < 1:
        raise DimensionError(f"encode_points needs [N x 3] with N >= 1, got {P.shape}")
    h = mlp_forward(Tensor(P), params.mlp(f"{prefix}.local"))
    g = broadcast_rows(maxpool_rows(h), P.shape[0])
    out = mlp_forward(concat_cols(h, g), params.mlp(f"{prefix}.global"))
    if frozen:
        out = Tensor(out.data)
    return PointFeatures(out, P)


def encode_nocs_guidance(nocs: np.ndarray, params: Params, scale: float = 1.0) -> Tensor:
    """Frozen guidance target F_N of width 2d for observed NOCS points."""
    feats = encode_points(nocs, params, "guide", frozen=True).feats
    return Tensor(feats.data * scale)

"""End-to-end network: parameter construction, forward pass, loss and pose prediction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone, fusion, heads, losses
from .config import RunConfig
from .diffmath import Params, RowGroups, Tensor, add, mul, take_rows
from .errors import ConfigError, EmptyInstanceError
from .geometry import Intrinsics, Pose, from_nocs, project
from .solver import PnPResult, ransac_pnp
from .synth import SceneSample


def build_params(cfg: RunConfig) -> Params:
    """All network tensors for ``cfg``; frozen parts are seeded from ``cfg.seed`` too."""
    cfg.validate()
    d = cfg.d_model
    params = Params()
    frozen_rng = np.random.default_rng([cfg.seed, 101])
    rng = np.random.default_rng([cfg.seed, 202])
    backbone.add_embedder(params, cfg.patch_size, d, frozen_rng)
    backbone.add_point_encoder(params, "guide", d, 2 * d, frozen_rng, frozen=True)
    backbone.add_geom_head(params, d, rng)
    backbone.add_point_encoder(params, "prior", d, d, rng)
    fusion.add_fusion(params, d, cfg.proj_depth, rng, cfg.fusion)
    heads.add_heads(params, d, cfg.head_hidden, cfg.head_depth, cfg.prior_points, rng,
                    cue_dim=backbone.SILHOUETTE_DIM)
    return params


def check_compatible(params: Params, cfg: RunConfig, prior_points: int, image_size: int | None = None) -> None:
    """Fail before inference when a checkpoint cannot run on a dataset."""
    n_assign = params.mlp("head.assign")[-1][0].shape[1]
    if n_assign != prior_points:
        raise ConfigError(f"checkpoint predicts over {n_assign} prior points, dataset has {prior_points}")
    if params["embed.w"].shape[1] != cfg.d_model:
        raise ConfigError(f"checkpoint width {params['embed.w'].shape[1]} != config d_model {cfg.d_model}")
    if image_size is not None and image_size % cfg.patch_size:
        raise ConfigError(f"image size {image_size} not divisible by patch size {cfg.patch_size}")


@dataclass
class Prepared:
    """Per-sample network inputs that do not depend on trainable weights."""
    tokens: np.ndarray      # [N_o x d] observed tokens only
    pixels: np.ndarray      # [N_o x 2]
    gt_nocs: np.ndarray     # [N_o x 3]
    F_N: np.ndarray | None  # [N_o x 2d]
    cue: np.ndarray         # [SILHOUETTE_DIM] mask statistics for the scale head


def prepare(sample: SceneSample, params: Params, cfg: RunConfig, with_target: bool = True) -> Prepared:
    grid = backbone.embed_patches(sample.image, sample.mask, params, cfg.patch_size)
    obs = grid.observed
    if obs.size == 0:
        raise EmptyInstanceError(f"sample {sample.split}/{sample.index} has no observed tokens")
    pix = grid.pixel_centers[obs]
    u, v = pix[:, 0].astype(int), pix[:, 1].astype(int)
    gt = np.asarray(sample.nocs_map[v, u], dtype=np.float64)
    F_N = None
    if with_target:
        F_N = backbone.encode_nocs_guidance(gt, params, cfg.guidance_scale).data
    return Prepared(grid.tokens.data[obs], pix, gt, F_N, backbone.silhouette_descriptor(sample.mask))


@dataclass
class Forward:
    """Outputs for a stack of samples; ``groups`` splits token rows by sample."""
    groups: RowGroups
    F_ins: Tensor
    F_fuse: Tensor
    F_guid: Tensor
    A: Tensor
    logits: Tensor
    D: Tensor                 # [B*N_r x 3], one block per sample
    prior_groups: RowGroups
    scale: heads.ScaleOutput
    corr: list[heads.Correspondences]

    def rows(self, x: Tensor, b: int, prior: bool = False) -> Tensor:
        g = self.prior_groups if prior else self.groups
        return x if g.n_groups == 1 else take_rows(x, g.rows(b))


def category_cache(params: Params, cfg: RunConfig, prior: np.ndarray) -> Tensor:
    F_r = backbone.encode_points(prior, params, "prior").feats
    return fusion.category_features(F_r, params)


def forward_batch(preps: list[Prepared], priors: list[np.ndarray], categories: list[int], s_b,
                  params: Params, cfg: RunConfig, cat_cache: dict | None = None) -> Forward:
    """One stacked pass over several samples; per-sample results match separate passes."""
    cat_cache = {} if cat_cache is None else cat_cache
    groups = RowGroups([len(p.tokens) for p in preps])
    F_rgb = Tensor(np.concatenate([p.tokens for p in preps]))
    F_g = backbone.geom_head(F_rgb, params)
    _, _, F_ins = fusion.fuse_instance(F_rgb, F_g, params, cfg.fusion, groups)
    blocks, owner, slot = [], [], {}
    for c, prior in zip(categories, priors):
        if c not in slot:
            if c not in cat_cache:
                cat_cache[c] = category_cache(params, cfg, prior)
            slot[c] = len(blocks)
            blocks.append(cat_cache[c])
        owner.append(slot[c])
    bank = fusion.CategoryBank.stack(blocks, owner)
    F_fuse = fusion.fuse_with_category(F_ins, bank, params, cfg.fusion, groups)
    F_guid = fusion.build_guidance_feature(F_fuse, groups)
    A, logits = heads.predict_assignment(F_ins, F_fuse, params)
    F_cat_rows, prior_groups = bank.per_sample()
    D = heads.predict_deformation(F_cat_rows, F_fuse, params, groups, prior_groups)
    cue = np.stack([p.cue for p in preps])
    scale = heads.predict_scale(F_ins, F_fuse, s_b, params, cfg.scale_mode, cue, groups)
    out = Forward(groups, F_ins, F_fuse, F_guid, A, logits, D, prior_groups, scale, [])
    for b, (p, prior) in enumerate(zip(preps, priors)):
        out.corr.append(heads.assemble_correspondences(out.rows(A, b), out.rows(D, b, prior=True), prior,
                                                       float(scale.s[b]), p.pixels))
    return out


def forward(prep: Prepared, prior: np.ndarray, s_b: float, params: Params, cfg: RunConfig,
            F_cat: Tensor | None = None) -> Forward:
    return forward_batch([prep], [prior], [0], s_b, params, cfg, None if F_cat is None else {0: F_cat})


def _mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total if len(terms) == 1 else mul(total, 1.0 / len(terms))


def batch_loss(items: list[tuple[SceneSample, Prepared]], params: Params, cfg: RunConfig,
               cat_cache: dict | None = None) -> losses.LossBreakdown:
    """Loss terms averaged over samples (each sample averages over its own tokens)."""
    samples = [s for s, _ in items]
    preps = [p for _, p in items]
    s_b = np.array([s.s_b for s in samples])
    s_true = np.array([s.pose.s for s in samples])
    out = forward_batch(preps, [s.prior for s in samples], [s.category for s in samples], s_b,
                        params, cfg, cat_cache)
    if cfg.scale_mode == "direct":
        L_s = losses.direct_scale_loss(out.scale.raw, s_true[:, None], cfg.scale_loss_norm)
    else:
        L_s = losses.scale_loss(out.scale.delta_s, s_true[:, None], s_b[:, None], cfg.scale_loss_norm)
    corr, regs, guid = [], [], []
    for b, p in enumerate(preps):
        main, reg = losses.corr_loss(out.corr[b].nocs, p.gt_nocs, out.rows(out.logits, b),
                                     out.rows(out.D, b, prior=True), cfg.corr_beta,
                                     cfg.entropy_weight, cfg.deform_weight)
        if cfg.chamfer_weight > 0:
            deformed = add(samples[b].prior, out.rows(out.D, b, prior=True))
            reg = add(reg, mul(losses.chamfer_loss(deformed, samples[b].model_points), cfg.chamfer_weight))
        corr.append(main)
        regs.append(reg)
        guid.append(losses.guidance_loss(out.rows(out.F_guid, b), p.F_N))
    return losses.total_loss(L_s, _mean(corr), _mean(guid), _mean(regs),
                             (cfg.lambda1, cfg.lambda2, cfg.lambda3))


def sample_loss(prep: Prepared, sample: SceneSample, params: Params, cfg: RunConfig,
                F_cat: Tensor | None = None) -> losses.LossBreakdown:
    return batch_loss([(sample, prep)], params, cfg, None if F_cat is None else {sample.category: F_cat})


@dataclass
class Prediction:
    pose: Pose | None
    extents: np.ndarray
    pnp: PnPResult
    nocs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def success(self) -> bool:
        return self.pose is not None


def solve(pixels: np.ndarray, metric: np.ndarray, K: Intrinsics, s: float, extents: np.ndarray,
          cfg: RunConfig, seed: int, nocs: np.ndarray | None = None) -> Prediction:
    res = ransac_pnp(pixels, metric, K, cfg.ransac(seed))
    pose = Pose(res.R, res.t, s) if res.success else None
    return Prediction(pose, np.asarray(extents, dtype=np.float64), res,
                      metric / s if nocs is None else nocs, pixels)


def predict(sample: SceneSample, params: Params, cfg: RunConfig, seed: int) -> Prediction:
    """Network forward (no tape) followed by RANSAC-PnP on the predicted correspondences."""
    prep = prepare(sample, params, cfg, with_target=False)
    out = forward(prep, sample.prior, sample.s_b, params, cfg)
    deformed = sample.prior + out.D.data
    extents = deformed.max(axis=0) - deformed.min(axis=0)
    corr = out.corr[0]
    return solve(prep.pixels, corr.metric.data, sample.K, float(out.scale.s[0]), extents, cfg, seed,
                 corr.nocs.data)


def predict_oracle(sample: SceneSample, cfg: RunConfig, seed: int) -> Prediction:
    """Ground-truth correspondences: NOCS read at the observed token centers,
    paired with their exact sub-pixel projections, scaled by the true scale.

    The stored point of a pixel projects up to half a pixel away from its
    center, so pairing it with the center itself would add quantization noise.
    """
    idx, pix = backbone.observed_tokens(sample.mask, cfg.patch_size)
    if idx.size == 0:
        raise EmptyInstanceError(f"sample {sample.split}/{sample.index} has no observed tokens")
    u, v = pix[:, 0].astype(int), pix[:, 1].astype(int)
    gt = np.asarray(sample.nocs_map[v, u], dtype=np.float64)
    exact = project(from_nocs(gt, sample.pose), sample.K)
    return solve(exact, gt * sample.pose.s, sample.K, sample.pose.s, sample.extents, cfg, seed, gt)

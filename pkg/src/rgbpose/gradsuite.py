"""Finite-difference checks of every differentiable op and of the full loss graph."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffmath as dm
from . import fusion, heads, losses, model
from .config import preset
from .diffmath import Params, Tensor
from .backbone import SILHOUETTE_DIM
from .synth import SceneSample

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class GradCase:
    name: str
    fn: Callable[[], Tensor]
    inputs: list[Tensor]


@dataclass
class GradRow:
    name: str
    max_rel_err: float
    passed: bool
    seconds: float


def _t(rng, *shape, lo=None) -> Tensor:
    x = rng.normal(size=shape)
    if lo is not None:
        # keep magnitudes away from kinks at zero
        x = np.sign(x) * (np.abs(x) + lo)
    return Tensor(x)


def _weights(n: int, rng) -> np.ndarray:
    return rng.normal(size=n)


def op_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    row = _t(rng, 1, 4)
    m1, m2 = _t(rng, 3, 5), _t(rng, 5, 2)
    k = _t(rng, 4, 6, lo=0.05)
    w34 = _weights(12, rng).reshape(3, 4)
    w46 = _weights(24, rng).reshape(4, 6)
    w32 = _weights(6, rng).reshape(3, 2)
    idx = np.array([2, 0, 2, 1])
    sm_a, sm_b = _t(rng, 4, 3), _t(rng, 4, 3)
    x_mlp = _t(rng, 5, 3)
    layers = [(_t(rng, 3, 4), _t(rng, 1, 4)), (_t(rng, 4, 2), _t(rng, 1, 2))]
    w52 = _weights(10, rng).reshape(5, 2)
    ga_q, ga_k, ga_v = _t(rng, 6, 3), _t(rng, 5, 3), _t(rng, 5, 2)
    ga_qg, ga_kg = dm.RowGroups([2, 1, 3]), dm.RowGroups([3, 2])
    w_ga = _weights(12, rng).reshape(6, 2)
    w74 = _weights(28, rng).reshape(7, 4)
    g = lambda y, w: dm.sum_(dm.mul(y, w))  # noqa: E731 - random projection to a scalar
    cases = [
        GradCase("add", lambda: g(dm.add(a, row), w34), [a, row]),
        GradCase("sub", lambda: g(dm.sub(a, b), w34), [a, b]),
        GradCase("mul", lambda: g(dm.mul(a, row), w34), [a, row]),
        GradCase("matmul", lambda: g(dm.matmul(m1, m2), w32), [m1, m2]),
        GradCase("transpose", lambda: g(dm.transpose(a), w34.T), [a]),
        GradCase("leaky_relu", lambda: g(dm.leaky_relu(k), w46), [k]),
        GradCase("abs", lambda: g(dm.abs_(k), w46), [k]),
        GradCase("clamp", lambda: g(dm.clamp(k, -0.5, 0.7), w46), [k]),
        GradCase("concat_cols", lambda: g(dm.concat_cols(a, m1), np.c_[w34, w34[:, :1] @ np.ones((1, 5))]), [a, m1]),
        GradCase("broadcast_rows", lambda: g(dm.broadcast_rows(row, 3), w34), [row]),
        GradCase("take_rows", lambda: g(dm.take_rows(a, idx), w46[:, :4]), [a]),
        GradCase("sum", lambda: dm.sum_(dm.mul(a, a)), [a]),
        GradCase("mean", lambda: dm.mean(dm.mul(a, b)), [a, b]),
        GradCase("avgpool_rows", lambda: g(dm.avgpool_rows(a), w34[:1]), [a]),
        GradCase("maxpool_rows", lambda: g(dm.maxpool_rows(a), w34[:1]), [a]),
        GradCase("softmax_rows", lambda: g(dm.softmax_rows(a), w34), [a]),
        GradCase("mean_row_entropy", lambda: dm.mean_row_entropy(a), [a]),
        GradCase("mse", lambda: dm.mse(a, b), [a, b]),
        GradCase("smooth_l1", lambda: dm.smooth_l1(sm_a, sm_b, 0.5), [sm_a, sm_b]),
        GradCase("mlp_forward", lambda: g(dm.mlp_forward(x_mlp, layers), w52),
                 [x_mlp] + [t for layer in layers for t in layer]),
        GradCase("concat_rows", lambda: g(dm.concat_rows(a, row, b), w74), [a, row, b]),
        GradCase("grouped_attention", lambda: g(dm.grouped_attention(ga_q, ga_k, ga_v, ga_qg, ga_kg, [1, 0, 1]), w_ga),
                 [ga_q, ga_k, ga_v]),
    ]
    return cases


def _randomize(params: Params, rng, scale: float = 0.3) -> None:
    """Give zero-initialized layers random values so every path carries gradient."""
    for name, t in params:
        if name not in params.frozen and not np.any(t.data):
            t.data = rng.normal(0.0, scale, size=t.shape)


def _toy_sample(cfg, rng, category: int = 0, n_o: int = 4) -> tuple[SceneSample, model.Prepared]:
    from .geometry import Intrinsics, Pose, random_rotation
    prior = rng.uniform(-0.4, 0.4, size=(cfg.prior_points, 3))
    gt = rng.uniform(-0.4, 0.4, size=(n_o, 3))
    sample = SceneSample(image=np.zeros((cfg.image_size, cfg.image_size, 3)), K=Intrinsics(100, 100, 8, 8),
                         mask=np.zeros((cfg.image_size, cfg.image_size), bool), nocs_map=np.zeros((1, 1, 3)),
                         pose=Pose(random_rotation(rng), [0, 0, 1], 0.23), extents=np.ones(3), category=category,
                         prior=prior, model_points=gt, s_b=0.2)
    prep = model.Prepared(tokens=rng.normal(size=(n_o, cfg.d_model)), pixels=rng.uniform(0, 16, (n_o, 2)),
                          gt_nocs=gt, F_N=rng.normal(0, 0.3, size=(n_o, 2 * cfg.d_model)),
                          cue=rng.uniform(0, 1, SILHOUETTE_DIM))
    return sample, prep


def module_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed + 1)
    cfg = preset("tiny").replace(prior_points=5, d_model=4, head_hidden=6, seed=seed)
    params = model.build_params(cfg)
    _randomize(params, rng)
    d = cfg.d_model
    F1, F2 = _t(rng, 3, d), _t(rng, 4, d)
    F_ins, F_cat = _t(rng, 3, 2 * d), _t(rng, 5, d)
    F_fuse = _t(rng, 3, d)
    w_nd = _weights(3 * d, rng).reshape(3, d)
    w_n2d = _weights(6 * d, rng).reshape(3, 2 * d)
    w_r3 = _weights(15, rng).reshape(5, 3)
    proj = fusion.qkv(params, "sa.rgb")
    c_g = fusion.qkv(params, "ca.g")
    prior = rng.uniform(-0.5, 0.5, (5, 3))
    gt3 = rng.uniform(-0.5, 0.5, (3, 3))
    ds = _t(rng, 1, 1)
    cd_pts, cd_target = _t(rng, 5, 3), rng.uniform(-0.5, 0.5, (7, 3))
    sum_w = lambda y, w: dm.sum_(dm.mul(y, w))  # noqa: E731

    def assign():
        A, _ = heads.predict_assignment(F_ins, F_fuse, params)
        return dm.smooth_l1(heads.assemble_correspondences(A, Tensor(np.zeros((5, 3))), prior, 0.3,
                                                           np.zeros((3, 2))).nocs, gt3, 0.1)

    def corr():
        A, logits = heads.predict_assignment(F_ins, F_fuse, params)
        D = heads.predict_deformation(F_cat, F_fuse, params)
        nocs = heads.assemble_correspondences(A, D, prior, 0.3, np.zeros((3, 2))).nocs
        main, reg = losses.corr_loss(nocs, gt3, logits, D, 0.1, 1e-3, 1e-2)
        return dm.add(main, reg)

    # target offset keeps the L1 kink away from the evaluation point
    cue = rng.uniform(0, 1, SILHOUETTE_DIM)
    s_true = 0.2 * (1.0 + heads.predict_scale(F_ins, F_fuse, 0.2, params, cue=cue).delta_s.item() + 0.37)

    def scale():
        return losses.scale_loss(heads.predict_scale(F_ins, F_fuse, 0.2, params, cue=cue).delta_s, s_true, 0.2)

    def pipeline():
        _, _, ins = fusion.fuse_instance(F1, F1 * 0.5 + 0.1, params)
        fuse = fusion.fuse_with_category(ins, F_cat, params)
        return sum_w(fusion.build_guidance_feature(fuse), w_n2d)

    sample, prep = _toy_sample(cfg, rng)
    pair = [_toy_sample(cfg, rng, category=c, n_o=n) for c, n in ((1, 3), (4, 5))]
    trainable = [t for name, t in params if name not in params.frozen]
    cfg_cd = cfg.replace(chamfer_weight=0.5)
    chosen = ["geom.0.w", "prior.local.0.w", "sa.g.v.0.w", "ca.rgb.q.0.w", "ca.cat.k.0.w", "reduce.1.w",
              "head.assign.2.w", "head.deform.0.w", "head.scale.2.w"]
    return [
        GradCase("self_attend", lambda: sum_w(fusion.self_attend(F1, proj), w_nd), [F1] + [t for l in proj.q + proj.k + proj.v for t in l]),
        GradCase("cross_attend", lambda: sum_w(fusion.cross_attend(F1, F2, proj.q, c_g.k, c_g.v), w_nd), [F1, F2]),
        GradCase("fuse_instance", lambda: sum_w(fusion.fuse_instance(F1, F1 * 0.5, params)[2], w_n2d), [F1]),
        GradCase("fuse_with_category", lambda: sum_w(fusion.fuse_with_category(F_ins, F_cat, params), w_nd), [F_ins, F_cat]),
        GradCase("build_guidance_feature", lambda: sum_w(fusion.build_guidance_feature(F_fuse), w_n2d), [F_fuse]),
        GradCase("fusion_pipeline", pipeline, [F1, F_cat]),
        GradCase("predict_assignment", assign, [F_ins, F_fuse]),
        GradCase("predict_deformation", lambda: sum_w(heads.predict_deformation(F_cat, F_fuse, params), w_r3), [F_cat, F_fuse]),
        GradCase("predict_scale", scale, [F_ins, F_fuse]),
        GradCase("scale_loss", lambda: losses.scale_loss(ds, 0.29, 0.2), [ds]),
        GradCase("corr_loss", corr, [F_ins, F_fuse, F_cat]),
        GradCase("guidance_loss", lambda: losses.guidance_loss(fusion.build_guidance_feature(F_fuse), Tensor(prep.F_N[:3])), [F_fuse]),
        GradCase("total_loss", lambda: model.sample_loss(prep, sample, params, cfg).total, [params[n] for n in chosen]),
        GradCase("chamfer_loss", lambda: losses.chamfer_loss(cd_pts, cd_target), [cd_pts]),
        GradCase("batch_total_loss", lambda: model.batch_loss(pair, params, cfg_cd).total, trainable),
    ]


def default_cases(seed: int = 0) -> list[GradCase]:
    return op_cases(seed) + module_cases(seed)


def run_suite(cases: list[GradCase], tol: float = TOLERANCE, eps: float = EPS) -> list[GradRow]:
    rows = []
    for case in cases:
        t0 = time.perf_counter()
        err = dm.gradcheck(case.fn, case.inputs, eps)
        rows.append(GradRow(case.name, err, bool(err <= tol), time.perf_counter() - t0))
    return rows


def format_rows(rows: list[GradRow], tol: float = TOLERANCE) -> str:
    w = max(len(r.name) for r in rows) + 2
    out = [f"{'op'.ljust(w)}{'max_rel_err':>14}  status"]
    for r in rows:
        out.append(f"{r.name.ljust(w)}{r.max_rel_err:14.3e}  {'PASS' if r.passed else 'FAIL'}")
    n_fail = sum(not r.passed for r in rows)
    out.append(f"{len(rows) - n_fail}/{len(rows)} passed at tolerance {tol:g}")
    return "\n".join(out) + "\n"

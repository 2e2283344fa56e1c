"""Command line entry point: ``rgbpose {gen-data,train,eval,infer,gradcheck}``.

Exit codes: 0 success (a failed pose is a result, not an error), 1 usage,
2 configuration, 3 runtime.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, preset
from .errors import ConfigError, RgbPoseError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args, default: str = "desk") -> RunConfig:
    cfg = load_config(args.config) if args.config else preset(default)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "lambda3", None) is not None:
        changes["lambda3"] = args.lambda3
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _dataset(path):
    from .synth import Dataset
    if not path:
        raise UsageError("--dataset is required")
    if not (Path(path) / "manifest.ini").exists():
        raise ConfigError(f"no dataset manifest under {path}")
    return Dataset(path)


def cmd_gen_data(args) -> int:
    from .synth import sample_dataset
    cfg = _config(args)
    if not args.out:
        raise UsageError("--out is required")
    seed = cfg.seed if args.seed is None else args.seed
    scfg = cfg.synth_config()
    scfg.validate()
    sample_dataset(scfg, seed, args.out)
    from .synth import Dataset
    ds = Dataset(args.out)
    counts = ds.category_counts()
    print(f"dataset: {args.out}")
    print(f"train: {ds.split_size('train')}  test: {ds.split_size('test')}")
    print("category  count  s_b     symmetric")
    for c in ds.categories:
        print(f"{c.name:<9} {counts[c.name]:>5}  {c.s_b:.3f}   {str(c.symmetric).lower()}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import loss_curve
    from .train import train
    cfg = _config(args)
    if not args.out:
        raise UsageError("--out is required")
    ds = _dataset(args.dataset)
    state = train(cfg, ds, args.out, resume=args.checkpoint,
                  progress=(lambda msg: print(msg, file=sys.stderr)) if args.verbose else None)
    out = Path(args.out)
    cfg.save(out / "config.txt")
    loss_curve(out / "loss_log.tsv", out / "loss_curve.png")
    lines = (out / "loss_log.tsv").read_text(encoding="utf-8").splitlines()
    print(f"epochs: {state.epoch}")
    print(f"steps: {state.opt.step_count}")
    if len(lines) > 1:
        print(f"final_total_loss: {float(lines[-1].split()[2]):.6g}")
    print(f"checkpoint: {out / 'last.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalharness import compare_runs, evaluate, write_report
    from .plotting import ablation_chart
    from .train import load_checkpoint
    ds = _dataset(args.dataset)
    out = Path(args.out or ".")
    reports = []
    if args.oracle:
        cfg = _config(args)
        rep, _ = evaluate(None, cfg, ds, args.split, oracle=True, workers=cfg.workers, label="oracle")
        reports.append(rep)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --oracle)")
        for ck in args.checkpoint:
            state = load_checkpoint(ck)
            cfg = state.cfg if args.workers is None else state.cfg.replace(workers=args.workers)
            label = Path(ck).parent.name or Path(ck).stem
            rep, _ = evaluate(state.params, cfg, ds, args.split, workers=cfg.workers, label=label)
            reports.append(rep)
    for i, rep in enumerate(reports):
        stem = "report" if len(reports) == 1 else f"report_{i}_{rep.label}"
        write_report(rep, out, stem)
        print(rep.to_text(), end="")
    if len(reports) > 1:
        table = compare_runs(reports)
        (out / "ablation.txt").write_text(table.to_text(), encoding="utf-8")
        (out / "ablation.tsv").write_text(table.to_tsv(), encoding="utf-8")
        ablation_chart(table, out / "ablation.png")
        print(table.to_text(), end="")
    return EXIT_OK


def cmd_infer(args) -> int:
    from . import model
    from .evalharness import ransac_seed, score_sample
    from .geometry import matrix_to_axis_angle, pose_box
    from .plotting import overlay
    ds = _dataset(args.dataset)
    n = ds.split_size(args.split)
    if not 0 <= args.sample < n:
        raise UsageError(f"--sample must lie in [0, {n}) for split {args.split}")
    sample = ds.sample(args.split, args.sample)
    if args.oracle:
        cfg = _config(args)
        pred = model.predict_oracle(sample, cfg, ransac_seed(cfg.seed, sample.index))
    else:
        if not args.checkpoint:
            raise UsageError("infer needs --checkpoint (or --oracle)")
        from .train import load_checkpoint
        state = load_checkpoint(args.checkpoint[0])
        model.check_compatible(state.params, state.cfg, ds.prior_points, ds.H)
        pred = model.predict(sample, state.params, state.cfg, ransac_seed(state.cfg.seed, sample.index))
    np.set_printoptions(precision=9, suppress=True)
    print(f"sample: {args.split}/{args.sample} category: {sample.category_name}")
    print(f"inliers: {pred.pnp.num_inliers}/{len(pred.pnp.inlier_flags)}")
    if pred.pose is None:
        print("pose: FAILED")
    else:
        p = pred.pose
        print("pose: OK")
        print(f"axis_angle: {' '.join(f'{v:.9f}' for v in matrix_to_axis_angle(p.R))}")
        for i, row in enumerate(p.R):
            print(f"R[{i}]: {' '.join(f'{v:.9f}' for v in row)}")
        print(f"t: {' '.join(f'{v:.9f}' for v in p.t)}")
        print(f"s: {p.s:.9f}")
        print(f"reproj_rmse_px: {pred.pnp.reproj_rmse:.6f}")
        sc = score_sample(p, pred.extents, sample.pose, sample.extents, sample.category)
        print(f"rot_err_deg: {sc.rot_deg:.6f}  trans_err_m: {sc.trans_m:.6f}  iou: {sc.iou:.4f}")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"overlay_{args.split}_{args.sample:06d}.png"
    gt_box = pose_box(sample.pose, sample.extents)
    pred_box = pose_box(pred.pose, pred.extents) if pred.pose is not None else None
    overlay(sample.image, sample.K, gt_box, pred_box, path)
    print(f"overlay: {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import default_cases, format_rows, run_suite
    seed = 0 if args.seed is None else args.seed
    rows = run_suite(default_cases(seed))
    print(format_rows(rows), end="")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rgbpose", description="RGB-only category-level pose pipeline on synthetic scenes")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="config file or preset name (desk, tiny, paper-shape)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if dataset:
            sp.add_argument("--dataset")
        return sp

    g = common(sub.add_parser("gen-data", help="render a synthetic dataset"), dataset=False)
    g.set_defaults(fn=cmd_gen_data)

    t = common(sub.add_parser("train", help="train a model"))
    t.add_argument("--lambda3", type=float, help="guidance weight override (0 disables guidance)")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = common(sub.add_parser("eval", help="score checkpoints (or the ground-truth oracle)"))
    e.add_argument("--checkpoint", action="append", help="repeat to compare several runs")
    e.add_argument("--oracle", action="store_true")
    e.add_argument("--workers", type=int)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.set_defaults(fn=cmd_eval)

    i = common(sub.add_parser("infer", help="pose for one sample plus a box overlay"))
    i.add_argument("--checkpoint", action="append")
    i.add_argument("--oracle", action="store_true")
    i.add_argument("--sample", type=int, required=True)
    i.add_argument("--split", default="test", choices=("train", "test"))
    i.set_defaults(fn=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference check of all ops")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "fn", None):
            raise UsageError("missing command; see --help")
        return args.fn(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (RgbPoseError, OSError, FloatingPointError, RuntimeError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

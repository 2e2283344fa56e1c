"""Dataset-level pose metrics, chance baselines and run comparison.

Hit rates are computed per category and averaged with equal category weight
for the overall number.  A failed pose counts as a miss in every metric.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import model
from .config import RunConfig
from .diffmath import Params
from .errors import EmptyInstanceError
from .geometry import CATEGORIES, Pose, category_name, pose_errors, random_rotation
from .synth import Dataset, SceneSample

METRICS = ("IoU50", "IoU75", "10cm", "10deg", "10deg10cm")
IOU_THRESHOLDS = {"IoU50": 0.5, "IoU75": 0.75}
TRANS_THRESHOLD_M = 0.10
ROT_THRESHOLD_DEG = 10.0


@dataclass
class SampleScore:
    index: int
    category: str
    success: bool
    rot_deg: float = math.inf
    trans_m: float = math.inf
    iou: float = 0.0
    hits: dict[str, bool] = field(default_factory=lambda: dict.fromkeys(METRICS, False))


def hits_from_errors(rot_deg: float, trans_m: float, iou: float) -> dict[str, bool]:
    rot_ok = rot_deg < ROT_THRESHOLD_DEG
    trans_ok = trans_m < TRANS_THRESHOLD_M
    return {"IoU50": iou > IOU_THRESHOLDS["IoU50"], "IoU75": iou > IOU_THRESHOLDS["IoU75"],
            "10cm": trans_ok, "10deg": rot_ok, "10deg10cm": rot_ok and trans_ok}


def score_sample(pred: Pose | None, pred_extents, gt: Pose, gt_extents, category, index: int = 0) -> SampleScore:
    name = category_name(category)
    if pred is None:
        return SampleScore(index, name, False)
    rot, trans, iou = pose_errors(pred, pred_extents, gt, gt_extents, name)
    return SampleScore(index, name, True, rot, trans, iou, hits_from_errors(rot, trans, iou))


@dataclass
class MetricReport:
    per_category: dict[str, dict[str, float]]
    counts: dict[str, int]
    overall: dict[str, float]
    n_samples: int
    n_failures: int
    label: str = ""

    @classmethod
    def from_scores(cls, scores: Sequence[SampleScore], label: str = "") -> "MetricReport":
        per_cat, counts = {}, {}
        for cat in CATEGORIES:
            mine = [s for s in scores if s.category == cat]
            counts[cat] = len(mine)
            per_cat[cat] = {m: (sum(s.hits[m] for s in mine) / len(mine) if mine else 0.0) for m in METRICS}
        present = [c for c in CATEGORIES if counts[c]]
        overall = {m: (float(np.mean([per_cat[c][m] for c in present])) if present else 0.0) for m in METRICS}
        return cls(per_cat, counts, overall, len(scores), sum(not s.success for s in scores), label)

    def to_text(self) -> str:
        lines = [f"label: {self.label}", f"samples: {self.n_samples}", f"failures: {self.n_failures}"]
        lines += [f"overall.{m}: {self.overall[m]:.6f}" for m in METRICS]
        for c in CATEGORIES:
            lines.append(f"{c}.count: {self.counts[c]}")
            lines += [f"{c}.{m}: {self.per_category[c][m]:.6f}" for m in METRICS]
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        rows = ["category\tcount\t" + "\t".join(METRICS)]
        for c in CATEGORIES:
            rows.append(f"{c}\t{self.counts[c]}\t" + "\t".join(f"{self.per_category[c][m]:.6f}" for m in METRICS))
        rows.append(f"overall\t{self.n_samples}\t" + "\t".join(f"{self.overall[m]:.6f}" for m in METRICS))
        return "\n".join(rows) + "\n"


def parse_report_text(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if ": " in line:
            k, v = line.split(": ", 1)
            out[k] = v
    return out


def ransac_seed(run_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, index]).generate_state(1)[0])


def _score_one(sample: SceneSample, params: Params | None, cfg: RunConfig, oracle: bool) -> SampleScore:
    seed = ransac_seed(cfg.seed, sample.index)
    try:
        pred = model.predict_oracle(sample, cfg, seed) if oracle else model.predict(sample, params, cfg, seed)
    except EmptyInstanceError:
        return SampleScore(sample.index, sample.category_name, False)
    return score_sample(pred.pose, pred.extents, sample.pose, sample.extents, sample.category, sample.index)


_WORKER: dict = {}


def _worker_init(root: str, split: str, params, cfg, oracle) -> None:
    _WORKER.update(ds=Dataset(root), split=split, params=params, cfg=cfg, oracle=oracle)


def _worker_run(i: int) -> SampleScore:
    w = _WORKER
    return _score_one(w["ds"].sample(w["split"], i), w["params"], w["cfg"], w["oracle"])


def evaluate(params: Params | None, cfg: RunConfig, dataset: Dataset, split: str = "test",
             oracle: bool = False, workers: int = 1, label: str = "",
             limit: int | None = None) -> tuple[MetricReport, list[SampleScore]]:
    """Score every sample of ``split``; ``oracle`` bypasses the network."""
    if not oracle:
        model.check_compatible(params, cfg, dataset.prior_points, dataset.H)
    n = dataset.split_size(split) if limit is None else min(limit, dataset.split_size(split))
    if workers > 1 and n > 1:
        import multiprocessing as mp
        ctx = mp.get_context("fork")
        with ctx.Pool(workers, _worker_init, (str(dataset.root), split, params, cfg, oracle)) as pool:
            scores = pool.map(_worker_run, range(n), chunksize=max(1, n // (4 * workers)))
    else:
        scores = [_score_one(dataset.sample(split, i), params, cfg, oracle) for i in range(n)]
    return MetricReport.from_scores(scores, label), scores


def random_pose(sample: SceneSample, cfg: RunConfig, rng: np.random.Generator) -> Pose:
    """Pose drawn from the generator's pose distribution, ignoring the image."""
    z = rng.uniform(cfg.depth_min, cfg.depth_max)
    xy = rng.uniform(-0.1, 0.1, size=2) * z
    return Pose(random_rotation(rng), np.array([xy[0], xy[1], z]), sample.s_b)


def random_pose_baseline(samples: Sequence[SceneSample], cfg: RunConfig, trials: int = 200,
                         seed: int = 0) -> dict[str, tuple[float, float]]:
    """Monte-Carlo chance level: (mean, std) over trials of each overall rate."""
    rng = np.random.default_rng([seed, 404])
    rates = {m: [] for m in METRICS}
    for _ in range(trials):
        scores = [score_sample(random_pose(s, cfg, rng), s.prior.max(0) - s.prior.min(0), s.pose, s.extents,
                               s.category, s.index) for s in samples]
        rep = MetricReport.from_scores(scores)
        for m in METRICS:
            rates[m].append(rep.overall[m])
    return {m: (float(np.mean(v)), float(np.std(v))) for m, v in rates.items()}


@dataclass
class AblationTable:
    labels: list[str]
    rates: list[dict[str, float]]
    deltas: list[dict[str, float]]

    def to_text(self) -> str:
        w = max(12, max(len(s) for s in self.labels) + 2)
        head = "config".ljust(w) + "".join(m.rjust(11) for m in METRICS)
        rows = [head]
        for lab, r in zip(self.labels, self.rates):
            rows.append(lab.ljust(w) + "".join(f"{100 * r[m]:11.1f}" for m in METRICS))
        rows.append("delta vs " + self.labels[0])
        for lab, d in zip(self.labels[1:], self.deltas[1:]):
            rows.append(lab.ljust(w) + "".join(f"{100 * d[m]:+11.1f}" for m in METRICS))
        return "\n".join(rows) + "\n"

    def to_tsv(self) -> str:
        rows = ["config\tkind\t" + "\t".join(METRICS)]
        for lab, r, d in zip(self.labels, self.rates, self.deltas):
            rows.append(f"{lab}\trate\t" + "\t".join(f"{r[m]:.6f}" for m in METRICS))
            rows.append(f"{lab}\tdelta\t" + "\t".join(f"{d[m]:.6f}" for m in METRICS))
        return "\n".join(rows) + "\n"


def compare_runs(reports: Iterable[MetricReport]) -> AblationTable:
    """Rates of each report and their deltas against the first one."""
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("compare_runs needs at least two reports")
    base = reports[0].overall
    labels = [r.label or f"run{i}" for i, r in enumerate(reports)]
    rates = [dict(r.overall) for r in reports]
    deltas = [{m: r.overall[m] - base[m] for m in METRICS} for r in reports]
    return AblationTable(labels, rates, deltas)


def write_report(report: MetricReport, out_dir, stem: str = "report", chart: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}.txt", out / f"{stem}.tsv"]
    paths[0].write_text(report.to_text(), encoding="utf-8")
    paths[1].write_text(report.to_tsv(), encoding="utf-8")
    if chart:
        from .plotting import metric_chart
        paths.append(metric_chart(report, out / f"{stem}.png"))
    return paths

"""Matplotlib figures written to files (Agg backend, no display needed)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import CATEGORIES, Intrinsics, OrientedBox, project  # noqa: E402

GT_COLOR = "lime"
PRED_COLOR = "red"
# corner index pairs of a box whose corners come from OrientedBox.corners()
BOX_EDGES = [(0, 1), (0, 2), (1, 3), (2, 3), (4, 5), (4, 6), (5, 7), (6, 7),
             (0, 4), (1, 5), (2, 6), (3, 7)]


def metric_chart(report, path) -> Path:
    from .evalharness import METRICS
    fig, ax = plt.subplots(figsize=(8, 3.5))
    x = np.arange(len(METRICS))
    width = 0.8 / (len(CATEGORIES) + 1)
    for i, cat in enumerate(CATEGORIES):
        ax.bar(x + i * width, [report.per_category[cat][m] for m in METRICS], width, label=cat)
    ax.bar(x + len(CATEGORIES) * width, [report.overall[m] for m in METRICS], width, color="k", label="overall")
    ax.set_xticks(x + 0.4 - width / 2, METRICS)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("hit rate")
    ax.legend(ncol=4, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def ablation_chart(table, path) -> Path:
    from .evalharness import METRICS
    fig, ax = plt.subplots(figsize=(8, 3.5))
    x = np.arange(len(METRICS))
    width = 0.8 / len(table.labels)
    for i, (lab, r) in enumerate(zip(table.labels, table.rates)):
        ax.bar(x + i * width, [r[m] for m in METRICS], width, label=lab)
    ax.set_xticks(x + 0.4 - width / 2, METRICS)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def loss_curve(log_path, path) -> Path:
    rows = [ln.split("\t") for ln in Path(log_path).read_text(encoding="utf-8").splitlines()[1:] if ln]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if rows:
        vals = np.array([[float(v) for v in r[2:]] for r in rows])
        for j, name in enumerate(["total", "L_s", "L_corr", "L_g", "reg"]):
            ax.plot(np.maximum(vals[:, j], 1e-12), label=name, lw=0.8)
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def _draw_box(ax, box: OrientedBox, K: Intrinsics, color: str) -> bool:
    corners = box.corners()
    if np.any(corners[:, 2] <= 0):
        return False
    uv = project(corners, K)
    for a, b in BOX_EDGES:
        ax.plot([uv[a, 0], uv[b, 0]], [uv[a, 1], uv[b, 1]], color=color, lw=1.2)
    return True


def overlay(image: np.ndarray, K: Intrinsics, gt_box: OrientedBox, pred_box: OrientedBox | None,
            path, title: str = "") -> Path:
    """Image with the ground-truth box in green and the predicted box in red."""
    H, W = image.shape[:2]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.clip(image, 0, 1), extent=(-0.5, W - 0.5, H - 0.5, -0.5))
    _draw_box(ax, gt_box, K, GT_COLOR)
    if pred_box is not None:
        _draw_box(ax, pred_box, K, PRED_COLOR)
    ax.set_xlim(-0.5, W - 0.5)
    ax.set_ylim(H - 0.5, -0.5)
    ax.set_title(title or ("pose: FAILED" if pred_box is None else ""), fontsize=8)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)

"""Report figures: training loss curve and class-wise Dice/IoU bars."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

# Fixed metadata keeps PNG bytes reproducible across runs.
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_curve(history: Sequence[tuple[int, float, float]], path, title: str = "training loss") -> Path:
    """Loss per step (left axis, log scale) with the learning rate overlaid."""
    if not history:
        raise ValueError("loss history is empty")
    steps = np.array([h[0] for h in history])
    lrs = np.array([h[1] for h in history])
    losses = np.array([h[2] for h in history])

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, color="tab:red", lw=1.2, label="loss")
    if np.all(losses > 0):
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("combined loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    lr_ax = ax.twinx()
    lr_ax.plot(steps, lrs, color="tab:blue", lw=0.8, ls="--", label="lr")
    lr_ax.set_ylabel("learning rate")
    lr_ax.ticklabel_format(axis="y", style="sci", scilimits=(-2, 2))
    fig.tight_layout()
    return _save(fig, path)


def plot_classwise(report: MetricsReport, path, class_names: Sequence[str] | None = None, title: str = "class-wise scores") -> Path:
    """Grouped Dice and IoU bars per class; absent classes are hatched."""
    k = report.num_classes
    names = list(class_names) if class_names else [str(i) for i in range(k)]
    if len(names) != k:
        raise ValueError(f"{len(names)} class names for {k} classes")
    x = np.arange(k)
    width = 0.38

    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * k + 2), 3.5))
    hatch = ["" if p else "//" for p in report.present]
    for offset, values, color, label in ((-width / 2, report.dice, "tab:green", "Dice"), (width / 2, report.iou, "tab:purple", "IoU")):
        bars = ax.bar(x + offset, values, width, color=color, label=label)
        for bar, h in zip(bars, hatch):
            bar.set_hatch(h)
    ax.axhline(report.mdice, color="tab:green", lw=0.8, ls=":")
    ax.axhline(report.miou, color="tab:purple", lw=0.8, ls=":")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20 if k > 3 else 0)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"{title} (mDice {report.mdice:.3f}, mIoU {report.miou:.3f})")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)

"""Report figures, rendered off-screen to image files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from papmask.core import Raster  # noqa: E402
from papmask.evaluate import ORDER, MetricsReport  # noqa: E402
from papmask.nnet import History  # noqa: E402

# fixed metadata keeps PNG output byte-stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def confusion_figure(rep: MetricsReport, path, title: str = "Predicted vs actual size") -> None:
    counts = rep.matrix.counts
    fig, ax = plt.subplots(figsize=(4.6, 4.0))
    im = ax.imshow(counts, cmap="Blues")
    labels = [s.value for s in ORDER]
    ax.set_xticks(range(4), labels)
    ax.set_yticks(range(4), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    hi = counts.max() if counts.size else 0
    for i in range(4):
        for j in range(4):
            ax.text(j, i, str(int(counts[i, j])), ha="center", va="center",
                    color="white" if hi and counts[i, j] > hi / 2 else "black")
    ax.set_title(f"{title}\naccuracy {100 * rep.accuracy:.1f}%, within one {100 * rep.within_one:.1f}%",
                 fontsize=9)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    _save(fig, path)


def history_figure(hist: History, path, title: str = "") -> None:
    ep = [r.epoch for r in hist.records]
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(ep, [r.train_rmse for r in hist.records], label="train")
    ax.plot(ep, [r.val_rmse for r in hist.records], label="validation")
    ax.axvline(hist.best_epoch, color="grey", linestyle=":", label=f"best (epoch {hist.best_epoch})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("RMSE (normalised)")
    ax.set_yscale("log")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def overlay_figure(image: Raster, record: dict, path) -> None:
    """The photograph with stage boxes and landmark points drawn on top."""
    fig, ax = plt.subplots(figsize=(image.width / 110, image.height / 110))
    ax.imshow(image.rgb().data)
    colours = {"face": "yellow", "nose": "lime", "coin": "cyan"}
    for stage, colour in colours.items():
        box = record.get(f"{stage}_box")
        if box:
            x, y, w, h = (float(v) for v in box.split())
            ax.add_patch(plt.Rectangle((x, y), w, h, fill=False, edgecolor=colour, linewidth=1))
        pts = record.get(f"{stage}_points")
        if pts:
            xy = np.array([float(v) for v in pts.split()]).reshape(-1, 2)
            ax.plot(xy[:, 0], xy[:, 1], "+", color=colour, markersize=8)
    ax.set_axis_off()
    ax.set_title(f"{record.get('nose_width_mm', 0):.1f} mm -> {record.get('size', '?')}", fontsize=8)
    fig.tight_layout(pad=0.2)
    _save(fig, path)

"""Static report figures (PNG) with matching CSV tables.

Everything renders through the Agg backend with a fixed rc context and
without the Software metadata entry, so identical inputs give identical
files.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.linewidth": 1.0,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "brt",
}
GOLDEN = (np.sqrt(5) - 1.0) / 2.0
LOSS_COLUMNS = ("obj3d_center", "obj3d_size", "cls3d_obj", "cls3d_size", "obj2d_center", "obj2d_giou", "cls2d")


def _figure(width=4.5, height=None):
    return plt.figure(figsize=(width, height or width * GOLDEN))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{x:.8g}" if isinstance(x, float) else x for x in r])
    return path


def epoch_curve(records: Sequence[dict], key: str = "total") -> tuple[np.ndarray, np.ndarray]:
    """Per-epoch mean of ``key`` over the step log."""
    epochs = sorted({int(r["epoch"]) for r in records})
    means = [np.mean([r[key] for r in records if r["epoch"] == e]) for e in epochs]
    return np.array(epochs), np.array(means)


def plot_loss_curves(records: Sequence[dict], png, csv_path=None) -> Path:
    """Step-wise total loss, its epoch mean, and the unweighted sub-terms on a log axis."""
    with plt.rc_context(STYLE):
        fig = _figure(6.0)
        ax1, ax2 = fig.subplots(1, 2)
        steps = np.array([r["step"] for r in records])
        ax1.plot(steps, [r["total"] for r in records], color="0.7", lw=0.6, label="step")
        ep, mean = epoch_curve(records)
        # x position of each epoch mean: its last step
        last = [max(r["step"] for r in records if r["epoch"] == e) for e in ep]
        ax1.plot(last, mean, color="C0", marker="o", ms=2, label="epoch mean")
        ax1.set_xlabel("step")
        ax1.set_ylabel("total loss")
        ax1.legend(frameon=False)
        for k in LOSS_COLUMNS:
            _, m = epoch_curve(records, k)
            ax2.plot(ep, np.maximum(m, 1e-6), label=k)
        ax2.set_yscale("log")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("loss term")
        ax2.legend(frameon=False, ncol=2)
        fig.tight_layout()
        out = _save(fig, png)
    if csv_path is not None:
        rows = [[int(e), float(m)] + [float(epoch_curve(records, k)[1][i]) for k in LOSS_COLUMNS] for i, (e, m) in enumerate(zip(ep, mean))]
        write_csv(csv_path, ["epoch", "total", *LOSS_COLUMNS], rows)
    return out


def plot_ap_bars(metrics: dict, png, csv_path=None) -> Path:
    """Grouped per-class AP bars at every threshold found in the metrics document."""
    names = list(metrics["per_class"])
    keys = sorted({k for v in metrics["per_class"].values() for k in v})
    with plt.rc_context(STYLE):
        fig = _figure(5.0)
        ax = fig.subplots()
        x = np.arange(len(names))
        width = 0.8 / max(len(keys), 1)
        for i, k in enumerate(keys):
            vals = [metrics["per_class"][n].get(k, 0.0) for n in names]
            ax.bar(x + (i - (len(keys) - 1) / 2) * width, vals, width, label=k.replace("ap_", "AP@0."))
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("average precision")
        ax.legend(frameon=False)
        fig.tight_layout()
        out = _save(fig, png)
    if csv_path is not None:
        write_csv(csv_path, ["class", *keys], [[n, *[float(metrics["per_class"][n].get(k, 0.0)) for k in keys]] for n in names])
    return out


def plot_projection(image: np.ndarray, uv: np.ndarray, boxes2d: Sequence, patch_size: int, png) -> Path:
    """Stitched image with projected seed points, derived 2D boxes and the patch grid."""
    H, W, _ = image.shape
    with plt.rc_context(STYLE):
        fig = _figure(2.0 * W / H, 2.2)
        ax = fig.subplots()
        ax.imshow(np.clip(image, 0, 1), origin="upper", extent=(0, W, H, 0), interpolation="nearest")
        for u in range(0, W + 1, patch_size):
            ax.axvline(u, color="w", lw=0.3, alpha=0.5)
        for v in range(0, H + 1, patch_size):
            ax.axhline(v, color="w", lw=0.3, alpha=0.5)
        ok = np.isfinite(uv).all(axis=1)
        ax.scatter(uv[ok, 0], uv[ok, 1], s=3, c="k")
        for b in boxes2d:
            ax.add_patch(Rectangle(b.min, b.max[0] - b.min[0], b.max[1] - b.min[1], fill=False, ec="r", lw=0.8))
        ax.set_xlim(0, W)
        ax.set_ylim(H, 0)
        ax.set_axis_off()
        fig.tight_layout(pad=0.1)
        return _save(fig, png)


def plot_attention(weights: np.ndarray, groups: dict[str, list[int]], png, stage_label: str = "") -> Path:
    """Head-averaged attention heat map with token-group separators."""
    avg = np.asarray(weights).mean(axis=0)
    with plt.rc_context(STYLE):
        fig = _figure(3.2, 3.2)
        ax = fig.subplots()
        ax.imshow(avg, cmap="viridis", interpolation="nearest")
        for start, _ in list(groups.values())[1:]:
            ax.axhline(start - 0.5, color="w", lw=0.5)
            ax.axvline(start - 0.5, color="w", lw=0.5)
        ax.set_xlabel("key token")
        ax.set_ylabel("query token")
        if stage_label:
            ax.set_title(stage_label)
        fig.tight_layout()
        return _save(fig, png)

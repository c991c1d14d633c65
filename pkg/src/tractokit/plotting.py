"""PNG figures written next to the CSV reports (headless, Agg backend)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_confusion(cm, label_names=None, path="confusion.png", normalize=True) -> Path:
    """Row-normalised confusion matrix restricted to classes that occur."""
    cm = np.asarray(cm, dtype=np.float64)
    used = np.flatnonzero(cm.sum(0) + cm.sum(1) > 0)
    cm = cm[np.ix_(used, used)]
    if normalize:
        cm = cm / np.maximum(cm.sum(1, keepdims=True), 1)
    names = [str(label_names[i]) if label_names is not None else str(i) for i in used]
    size = 2.5 + 0.22 * len(used)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(size, size))
        im = ax.imshow(cm, cmap="Blues", vmin=0, vmax=1 if normalize else None)
        ax.set_xticks(range(len(used)), names, rotation=90)
        ax.set_yticks(range(len(used)), names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if len(used) <= 16:
            for i, j in np.ndindex(cm.shape):
                if cm[i, j] > 0:
                    ax.text(j, i, f"{cm[i, j]:.2f}" if normalize else f"{int(cm[i, j])}", ha="center", va="center",
                            color="white" if cm[i, j] > 0.6 * cm.max() else "black", fontsize=6)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        return _save(fig, path)


def plot_training(reports, path="training.png") -> Path:
    """Loss, accuracy and learning rate per epoch, one row per TrainReport."""
    reports = [r for r in reports if r.rows]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(reports), 3, figsize=(8, 2.2 * max(len(reports), 1)), squeeze=False)
        for row, rep in zip(axes, reports):
            ep = [r["epoch"] for r in rep.rows]
            for key, style in (("train_loss", "-"), ("val_loss", "--")):
                ys = [r[key] for r in rep.rows]
                if not all(isinstance(y, float) and math.isnan(y) for y in ys):
                    row[0].plot(ep, ys, style, label=key.split("_")[0])
            for key, style in (("train_acc", "-"), ("val_acc", "--"), ("val_f1", ":")):
                ys = [r[key] for r in rep.rows]
                if not all(isinstance(y, float) and math.isnan(y) for y in ys):
                    row[1].plot(ep, ys, style, label=key.replace("_", " "))
            row[2].plot(ep, rep.lr_trace(), ".-")
            row[2].set_yscale("log")
            row[0].set_ylabel(rep.stage or "loss")
            if rep.best_epoch >= 0:
                row[1].axvline(rep.best_epoch, color="0.6", lw=0.8)
            for ax, title in zip(row, ("loss", "accuracy / F1 (%)", "learning rate")):
                ax.set_title(title)
                ax.set_xlabel("epoch")
            for ax in row[:2]:
                if ax.get_legend_handles_labels()[0]:
                    ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_table(rows, path="ablation.png", metric="F1") -> Path:
    """Heatmap of a table CSV (as parsed rows) for one metric; '-' cells stay blank."""
    from tractokit.ablation import numeric_cells

    header, body = rows[0], rows[1:]
    start = 2 if header[0] == "embeddings" else 3
    values = numeric_cells(rows)
    keep = [i for i, r in enumerate(body) if r[start - 1] == metric]
    data = values[keep]
    labels = [body[i][0] if start == 2 else f"{body[i][0]} ({body[i][1]})" for i in keep]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.3 * data.shape[1] + 2.5, 0.5 * len(keep) + 1.2))
        im = ax.imshow(np.ma.masked_invalid(data), cmap="viridis", aspect="auto")
        ax.set_xticks(range(data.shape[1]), header[start:], rotation=30, ha="right")
        ax.set_yticks(range(len(keep)), labels)
        for i, j in np.ndindex(data.shape):
            if np.isfinite(data[i, j]):
                ax.text(j, i, f"{data[i, j]:.1f}", ha="center", va="center", color="white", fontsize=7)
        ax.set_title(f"{metric} (%)")
        fig.colorbar(im, ax=ax)
        return _save(fig, path)

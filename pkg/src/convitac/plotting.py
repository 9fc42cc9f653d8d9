"""PNG figures written next to the CSV outputs (Agg backend, no display needed)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_metrics(rows: Sequence[tuple[int, float, float, float]], path) -> Path:
    """Loss and accuracy curves from (epoch, train_loss, train_acc, eval_acc) rows."""
    rows = np.asarray(rows, dtype=float)
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.8))
        ax1.plot(rows[:, 0], rows[:, 1], marker="o", ms=3)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("train loss")
        ax2.plot(rows[:, 0], rows[:, 2], marker="o", ms=3, label="train")
        ax2.plot(rows[:, 0], rows[:, 3], marker="s", ms=3, label="eval")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("accuracy")
        ax2.set_ylim(0, 1.02)
        ax2.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_pca(coords: np.ndarray, modality: Sequence[str], labels: Sequence[int], path,
             title: str | None = None) -> Path:
    """Scatter of 2-D PCA coordinates: colour by class, marker by modality."""
    modality = np.asarray(modality)
    labels = np.asarray(labels)
    markers = {"visual": "o", "tactile": "^"}
    k = int(labels.max()) + 1 if len(labels) else 1
    cmap = plt.get_cmap("tab10" if k <= 10 else "tab20", k)
    norm = matplotlib.colors.BoundaryNorm(np.arange(k + 1) - 0.5, k)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        for mod, marker in markers.items():
            sel = modality == mod
            sc = ax.scatter(coords[sel, 0], coords[sel, 1], c=labels[sel], cmap=cmap,
                            norm=norm, marker=marker, s=12, alpha=0.75, label=mod)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend(loc="best")
        if title:
            ax.set_title(title)
        fig.colorbar(sc, ax=ax, label="class", ticks=np.arange(k))
        return _save(fig, path)


def plot_saliency(images: Sequence[np.ndarray], maps: Sequence[np.ndarray],
                  masks: Sequence[np.ndarray | None], titles: Sequence[str], path) -> Path:
    """Each column: the image with its saliency overlaid and the contact outline."""
    n = len(images)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4), squeeze=False)
        for ax, img, sal, mask, title in zip(axes[0], images, maps, masks, titles):
            img = np.asarray(img)
            ax.imshow(img[..., 0] if img.shape[-1] == 1 else img, cmap="gray",
                      vmin=0, vmax=1)
            ax.imshow(sal, cmap="jet", alpha=0.45, vmin=0, vmax=1)
            if mask is not None:
                ax.contour(mask, levels=[0.5], colors="white", linewidths=0.8)
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        return _save(fig, path)


def plot_ablation(summary: Sequence[dict], path) -> Path:
    """Grouped bars of mean eval accuracy (error bars: std over seeds)."""
    fusions = list(dict.fromkeys(s["fusion"] for s in summary))
    conditions = list(dict.fromkeys(s["condition"] for s in summary))
    lookup = {(s["condition"], s["fusion"]): s for s in summary}
    width = 0.8 / max(len(conditions), 1)
    x = np.arange(len(fusions))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.4 * len(fusions), 3.0))
        for i, cond in enumerate(conditions):
            means = [lookup.get((cond, f), {}).get("mean", np.nan) for f in fusions]
            stds = [lookup.get((cond, f), {}).get("std", 0.0) for f in fusions]
            ax.bar(x + (i - (len(conditions) - 1) / 2) * width, means, width, yerr=stds,
                   capsize=3, label=cond)
        ax.set_xticks(x)
        ax.set_xticklabels(fusions)
        ax.set_ylabel("eval accuracy")
        ax.set_ylim(0, 1.05)
        ax.legend(title="condition", loc="lower left", bbox_to_anchor=(1.0, 0.0))
        fig.tight_layout()
        return _save(fig, path)


def plot_pretrain(loss: Sequence[float], retrieval: Sequence[float], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax1 = plt.subplots(figsize=(4.2, 2.8))
        epochs = np.arange(1, len(loss) + 1)
        ax1.plot(epochs, loss, color="C0", marker="o", ms=3)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("NT-Xent loss per row", color="C0")
        if len(retrieval):
            ax2 = ax1.twinx()
            ax2.plot(epochs, retrieval, color="C1", marker="s", ms=3)
            ax2.set_ylabel("held-out retrieval", color="C1")
            ax2.set_ylim(0, 1.02)
        fig.tight_layout()
        return _save(fig, path)

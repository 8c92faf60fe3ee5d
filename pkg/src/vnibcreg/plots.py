"""Static loss-curve and confusion-matrix figures."""
from __future__ import annotations

import os
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CURVE_TERMS = ("total", "invariance", "variance_t", "covariance_t", "tnc_bce", "tnc_corr_pos", "tnc_corr_neg")


def epoch_means(loss_log: Sequence[Dict[str, float]], term: str) -> List[float]:
    by_epoch: Dict[int, List[float]] = {}
    for row in loss_log:
        by_epoch.setdefault(int(row["epoch"]), []).append(float(row[term]))
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def plot_loss_curves(loss_log: Sequence[Dict[str, float]], path: str | os.PathLike, title: str = "") -> None:
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    axes[0].plot(epoch_means(loss_log, "total"), marker=".")
    axes[0].set(xlabel="epoch", ylabel="total loss", title=title or "pretraining loss")
    for term in CURVE_TERMS[1:]:
        values = epoch_means(loss_log, term)
        if any(v != 0 for v in values):
            axes[1].plot(values, label=term)
    axes[1].set(xlabel="epoch", ylabel="term value", title="loss terms")
    if axes[1].lines:
        axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_confusion(matrix: Sequence[Sequence[int]], class_names: Sequence[str], path: str | os.PathLike,
                   title: str = "") -> None:
    mat = np.asarray(matrix, dtype=float)
    rows = mat.sum(axis=1, keepdims=True)
    frac = np.divide(mat, rows, out=np.zeros_like(mat), where=rows > 0)
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(class_names), 0.8 + 0.7 * len(class_names)))
    im = ax.imshow(frac, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right")
    ax.set_yticks(range(len(class_names)), class_names)
    for i in range(mat.shape[0]):
        for j in range(mat.shape[1]):
            ax.text(j, i, int(mat[i, j]), ha="center", va="center", color="white" if frac[i, j] > 0.5 else "black")
    ax.set(xlabel="predicted", ylabel="true", title=title or "confusion (row-normalized colour)")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)

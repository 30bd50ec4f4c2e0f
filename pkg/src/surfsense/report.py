"""Plots for training logs and evaluation runs (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import TERMS  # noqa: E402


def loss_curve(rows: list[dict], path) -> Path:
    """Total loss and every term against step, log-scaled where positive."""
    path = Path(path)
    steps = np.array([r["step"] for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4.2))
    if len(rows):
        for name in ("loss",) + TERMS:
            y = np.array([r[name] for r in rows], dtype=float)
            if not np.any(y > 0):
                continue
            ax.plot(steps, np.where(y > 0, y, np.nan), lw=2.0 if name == "loss" else 1.0, label=name)
        ax.set_yscale("log")
        ax.legend(fontsize=7, ncol=4)
    ax.set_xlabel("step")
    ax.set_ylabel("value")
    ax.set_title("training losses")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def distance_histogram(d_pred_to_gt, d_gt_to_pred, threshold: float, path) -> Path:
    """Overlaid histograms of both nearest-neighbour directions with the F-score threshold."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    a = np.asarray(d_pred_to_gt, dtype=float)
    b = np.asarray(d_gt_to_pred, dtype=float)
    hi = max(float(np.percentile(np.concatenate([a, b]), 99)) if a.size + b.size else 1.0, threshold * 1.5)
    bins = np.linspace(0.0, hi, 60)
    if a.size:
        ax.hist(np.minimum(a, hi), bins=bins, alpha=0.55, label="pred to gt (accuracy)")
    if b.size:
        ax.hist(np.minimum(b, hi), bins=bins, alpha=0.55, label="gt to pred (completeness)")
    ax.axvline(threshold, color="k", ls="--", lw=1, label=f"threshold {threshold:.4g}")
    ax.set_xlabel("nearest-neighbour distance")
    ax.set_ylabel("points")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path

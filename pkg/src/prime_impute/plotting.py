"""Figures for sweep tables and training histories.

Rendering is opt-in from the command line; the CSV tables stay the primary
output and every figure is drawn from the same rows that were written.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def fig_size(fraction: float = 1.0, ratio: float | None = None) -> tuple[float, float]:
    """Width and height in inches for a fraction of a 6.5 inch text column."""
    ratio = (np.sqrt(5.0) - 1.0) / 2.0 if ratio is None else ratio  # golden
    width = 6.5 * fraction
    return width, width * ratio


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def _numeric(values: Sequence) -> bool:
    try:
        [float(v) for v in values]
    except (TypeError, ValueError):
        return False
    return True


def plot_sweep(rows: Sequence[dict], path, metric: str = "mse") -> Path:
    """Seed-mean metric per swept value with a one-std band and the per-seed points."""
    means = [r for r in rows if r["seed"] == "mean"]
    stds = {str(r["value"]): float(r[metric]) for r in rows if r["seed"] == "std"}
    if not means:
        raise ValueError("sweep rows contain no seed-mean rows")
    axis = means[0]["axis"]
    labels = [str(r["value"]) for r in means]
    numeric = _numeric(labels)
    xs = np.array([float(v) for v in labels]) if numeric else np.arange(len(labels))
    mu = np.array([float(r[metric]) for r in means])
    sd = np.array([stds.get(v, 0.0) for v in labels])
    pos = dict(zip(labels, xs))

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=fig_size(0.6))
        seeds = [r for r in rows if r["seed"] not in ("mean", "std")]
        ax.plot([pos[str(r["value"])] for r in seeds], [float(r[metric]) for r in seeds],
                ".", color="0.6", ms=4, label="per seed")
        ax.plot(xs, mu, "o-", color="C0", ms=4, label="seed mean")
        ax.fill_between(xs, mu - sd, mu + sd, color="C0", alpha=0.2, lw=0)
        if not numeric:
            ax.set_xticks(xs, labels, rotation=20)
        ax.set_xlabel(axis.replace("_", " "))
        ax.set_ylabel(f"held-out {metric.upper()}")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_history(history: Sequence[dict], path) -> Path:
    """Training loss and validation MSE per epoch; shaded where prototypes were on."""
    epochs = np.array([h["epoch"] for h in history])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=fig_size(0.6))
        ax.plot(epochs, [h["train_loss"] for h in history], color="C0", label="training loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        val = [h["val_mse"] for h in history]
        if any(v is not None for v in val):
            ax2 = ax.twinx()
            ax2.plot(epochs, [np.nan if v is None else v for v in val], color="C1", label="validation MSE")
            ax2.set_ylabel("validation MSE")
            ax2.spines["right"].set_visible(True)
            ax.figure.legend(frameon=False, loc="upper right", bbox_to_anchor=(0.88, 0.88))
        active = [h["epoch"] for h in history if h["prototypes_active"]]
        if active:
            ax.axvspan(min(active) - 0.5, max(active) + 0.5, color="0.9", zorder=0)
        return _save(fig, path)

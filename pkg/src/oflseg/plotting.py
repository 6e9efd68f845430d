"""Report figures rendered with the Agg backend.

Every function writes one PNG and returns its path. PNG metadata carrying the
matplotlib version is stripped so identical inputs give identical files.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}

ABLATION_COLORS = {"base": "#8c8c8c", "learner": "#4c72b0", "full": "#dd8452"}


def _save(fig, path) -> str:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(losses, lrs, path) -> str:
    """Per-epoch training loss on a linear axis, learning rate on a log twin axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = np.arange(1, len(losses) + 1)
        ax.plot(epochs, losses, marker="o", ms=2.5, lw=1.2, color="#4c72b0", label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("BCE + soft Dice")
        twin = ax.twinx()
        twin.step(epochs, lrs, where="post", color="#c44e52", lw=1.0, ls="--", label="lr")
        twin.set_yscale("log")
        twin.set_ylabel("learning rate")
        twin.grid(False)
        lines = ax.get_lines() + twin.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right")
        return _save(fig, path)


def plot_sequence_scores(report: dict, path) -> str:
    """Per-sequence mean Dice bars (one panel per class) with the overall mean marked."""
    classes = report["per_class"]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(classes), 1, squeeze=False,
                                 figsize=(5.0, 2.6 * len(classes)))
        for ax, entry in zip(axes[:, 0], classes):
            rows = entry["per_sequence"]
            ax.bar(range(len(rows)), [r["dice"] for r in rows], color="#4c72b0")
            ax.axhline(entry["mean_dice"], color="k", lw=0.8, ls=":")
            ax.set_xticks(range(len(rows)), [r["sequence"] for r in rows], rotation=45,
                          ha="right")
            ax.set_ylim(0, 1)
            ax.set_ylabel("Dice")
            ax.set_title(f"{entry['class']}: mean Dice {entry['mean_dice']:.3f}, "
                         f"AHD {entry['mean_ahd']:.2f}")
        return _save(fig, path)


def plot_ablation(rows: list[dict], path) -> str:
    """Mean Dice per ablation variant; ``rows`` carry ``ablation`` and ``mean_dice``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [r["ablation"] for r in rows]
        vals = [r["mean_dice"] for r in rows]
        bars = ax.bar(names, vals, color=[ABLATION_COLORS.get(n, "#55a868") for n in names])
        ax.bar_label(bars, fmt="%.3f", padding=2)
        ax.set_ylim(0, 1)
        ax.set_ylabel("mean Dice")
        return _save(fig, path)


def plot_sweep(values, dice, path, xlabel: str) -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(values, dice, marker="s", color="#55a868")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("mean Dice")
        return _save(fig, path)

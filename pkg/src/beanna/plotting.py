"""Figures for the CLI: variant comparison bars and training curves."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def figure(width: float = 6.0, height: float | None = None):
    """A figure with the house rcParams applied."""
    plt.rcParams.update(
        {
            "font.size": 9,
            "axes.spines.top": False,
            "axes.spines.right": False,
            "axes.grid": True,
            "grid.alpha": 0.3,
            "savefig.dpi": 150,
        }
    )
    return plt.figure(figsize=(width, height or width * GOLDEN))


def comparison_chart(rows, path, labels=("a", "b")):
    """Bar chart of measured vs reference ratios.

    ``rows`` holds ``(metric, value_a, value_b, ratio, reference_ratio)``.
    """
    fig = figure(7.0)
    axes = fig.subplots(1, len(rows) + 1, gridspec_kw={"width_ratios": [1] * len(rows) + [1.2]})
    for ax, (metric, va, vb, _, _) in zip(axes, rows):
        ax.bar(labels, [va, vb], color=["#4c72b0", "#dd8452"])
        ax.set_title(metric, fontsize=8)
        ax.tick_params(axis="x", labelsize=7)
    ax = axes[-1]
    xs = range(len(rows))
    ax.bar([x - 0.2 for x in xs], [r[3] for r in rows], width=0.4, label="measured")
    ax.bar([x + 0.2 for x in xs], [r[4] for r in rows], width=0.4, label="reference")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([r[0].split()[0] for r in rows], fontsize=7)
    ax.set_title("ratio", fontsize=8)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)


def accuracy_curve(curve, path, title: str = "test accuracy"):
    """``curve`` is a list of ``(epoch, loss, accuracy)``."""
    fig = figure()
    ax = fig.add_subplot(1, 1, 1)
    epochs = [c[0] for c in curve]
    ax.plot(epochs, [100 * c[2] for c in curve], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_ylabel("accuracy (%)")
    ax.set_title(title)
    ax2 = ax.twinx()
    ax2.plot(epochs, [c[1] for c in curve], color="grey", ls="--", lw=1)
    ax2.set_ylabel("training loss")
    ax2.grid(False)
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)

"""Figure rendering for the CLI report paths.

Each report command writes delimited data first; these helpers render the
matching matplotlib figures next to it (activation histograms, training
curves, quantization-parameter trajectories).
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .calibrate import ActivationStats
from .training import History


def render_histograms(stats: dict[str, ActivationStats], path: str) -> None:
    """One subplot per layer showing the output-activation distribution."""
    keys = list(stats)
    ncols = min(3, len(keys))
    nrows = (len(keys) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(4 * ncols, 2.6 * nrows), squeeze=False)
    for ax in axes.ravel()[len(keys):]:
        ax.axis("off")
    for key, ax in zip(keys, axes.ravel()):
        st = stats[key]
        if st.max > st.min:
            edges = np.linspace(st.min, st.max, st.histogram.size + 1)
            width = edges[1] - edges[0]
            ax.bar(edges[:-1], st.histogram, width=width, align="edge", color="#4878cf")
        else:
            ax.bar([st.min], [int(st.histogram.sum())], width=0.05, color="#4878cf")
        ax.axvline(0.0, color="k", lw=0.6, alpha=0.5)
        ax.set_title(f"{key}  [{st.min:.3g}, {st.max:.3g}]", fontsize=9)
        ax.tick_params(labelsize=7)
    fig.suptitle("activation distributions", fontsize=11)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_training_curves(history: History, path: str) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(history.epochs, history.train_loss, marker="o", ms=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.plot(history.epochs, [100 * a for a in history.eval_accuracy], marker="o", ms=3, color="#d65f5f")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("eval accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_qparam_trajectories(history: History, path: str) -> None:
    """Scale and zero-point trajectories per layer over the training epochs."""
    if not history.qparams or not history.qparams[0]:
        return
    names = sorted(history.qparams[0])
    scales = [n for n in names if n.endswith(".f") or ".f_" in n]
    zeros = [n for n in names if n.endswith(".z") or ".z_" in n]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.4))
    for n in scales:
        ax1.plot(history.epochs, [q[n] for q in history.qparams], label=n, lw=1)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("scale")
    ax1.set_yscale("log")
    ax1.legend(fontsize=6, ncol=2)
    for n in zeros:
        ax2.plot(history.epochs, [q[n] for q in history.qparams], label=n, lw=1)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("zero-point")
    ax2.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)

"""Matplotlib figures rendered next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_gate_heatmap(g, path, title="gate matrix"):
    """Heatmap of an (N, d) gate matrix, rows = sequence positions."""
    g = np.asarray(g)
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(g, aspect="auto", cmap="viridis")
    ax.set_xlabel("hidden dimension")
    ax.set_ylabel("sequence position")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="gate value")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curves(traces, path, title="training loss"):
    """One curve per labelled loss trace."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, trace in traces.items():
        ax.plot(np.arange(len(trace)), trace, label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if len(traces) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_bars(labels, metrics, path, title="held-out exact match"):
    """Grouped bars: one group per run label, one bar per task."""
    tasks = sorted({t for m in metrics for t in m})
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(tasks))
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(labels)), 4))
    for j, task in enumerate(tasks):
        vals = [m.get(task, 0.0) for m in metrics]
        ax.bar(x + j * width, vals, width, label=task)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("exact match")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

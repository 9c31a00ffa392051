"""Matplotlib figures for the report command. Always renders off-screen."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_accuracy_curves(curves: dict[str, list[list[float]]], path: str | Path,
                         title: str = "Test accuracy per epoch") -> Path:
    """``curves`` maps a run label to one accuracy curve per seed; draws mean and min-max band."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, runs in curves.items():
        arr = np.asarray(runs, dtype=float)
        epochs = np.arange(arr.shape[1])
        ax.plot(epochs, arr.mean(axis=0), label=label, linewidth=1.5)
        if arr.shape[0] > 1:
            ax.fill_between(epochs, arr.min(axis=0), arr.max(axis=0), alpha=0.15)
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_ablation_bars(summary: dict[str, list[float]], path: str | Path,
                       title: str = "Final test accuracy") -> Path:
    """One bar per configuration (mean over seeds) with the individual seeds as dots."""
    labels = list(summary)
    means = [float(np.mean(summary[k])) for k in labels]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(labels)), 3.6))
    xs = np.arange(len(labels))
    ax.bar(xs, means, color="tab:blue", alpha=0.6)
    for x, k in zip(xs, labels):
        ax.scatter(np.full(len(summary[k]), x), summary[k], color="k", s=10, zorder=3)
        ax.text(x, means[x] + 0.01, f"{means[x]:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(xs, labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_heatmap_grid(image: np.ndarray, maps: np.ndarray, channels, path: str | Path,
                      title: str = "") -> Path:
    """Input image next to each channel map of one group."""
    n = len(maps) + 1
    fig, axes = plt.subplots(1, n, figsize=(1.8 * n, 2.0))
    axes[0].imshow(image, cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("input", fontsize=8)
    for ax, m, ch in zip(axes[1:], maps, channels):
        ax.imshow(image, cmap="gray", vmin=0, vmax=1,
                  extent=(0, m.shape[1], m.shape[0], 0))
        ax.imshow(m, cmap="jet", alpha=0.5, vmin=0, vmax=1, extent=(0, m.shape[1], m.shape[0], 0))
        ax.set_title(f"ch {int(ch)}", fontsize=8)
    for ax in axes:
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)

"""Matplotlib renderings written next to the CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .train import TrainLog  # noqa: E402


def save_loss_curve(log: TrainLog, path) -> None:
    """Per-step loss with a 10-step moving average overlay."""
    steps = [s.step for s in log.steps]
    losses = log.losses()
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.8, alpha=0.5, label="loss")
    if len(losses) >= 10:
        kernel = np.ones(10) / 10
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[9:], smooth, lw=1.6, label="10-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy loss")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_gate_profile(gates: np.ndarray, sample_id: str, path) -> None:
    """Bar chart of per-channel gate weights for one sample."""
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.bar(np.arange(len(gates)), gates, width=1.0)
    ax.set_xlabel("channel")
    ax.set_ylabel("gate weight")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(f"channel gates: {sample_id}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_branch_grid(responses: dict[str, np.ndarray], sample_id: str, path) -> None:
    """Channel-mean heatmap of every aggregator branch, side by side."""
    names = list(responses)
    fig, axes = plt.subplots(1, len(names), figsize=(2.2 * len(names), 2.6))
    for ax, name in zip(np.atleast_1d(axes), names):
        ax.imshow(responses[name].mean(axis=0), cmap="viridis")
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(f"branch responses: {sample_id}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""Figure rendering for the report paths.

Every command that writes a delimited report can also render the matching
matplotlib figures next to it (PNG, Agg backend, no display needed).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .synthetic import AbReport
from .training import History

_ARM_COLORS = {"no_kge": "#777777", "kge_true": "#1f77b4", "kge_scrambled": "#d62728"}


def plot_history(history: History, path: str) -> None:
    """Train/validation loss curves with the best epoch marked."""
    epochs = [e.epoch for e in history.epochs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [e.train_mse for e in history.epochs], marker="o", label="train MSE")
    ax.plot(epochs, [e.val_mse for e in history.epochs], marker="s", label="val MSE")
    if history.best_epoch >= 0:
        ax.axvline(history.best_epoch, color="gray", linestyle="--", linewidth=1,
                   label=f"best epoch ({history.best_epoch})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (standardized)")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ab_report(report: AbReport, path: str) -> None:
    """Per-arm mean test MSE with per-seed scatter."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, arm in enumerate(report.arms):
        mses = report.arm_mses(arm)
        color = _ARM_COLORS.get(arm, "black")
        ax.bar(i, mses.mean(), yerr=report.std_mse(arm), width=0.6,
               color=color, alpha=0.6, capsize=4)
        ax.scatter(np.full(len(mses), i), mses, color=color, zorder=3, s=18)
    ax.set_xticks(range(len(report.arms)))
    ax.set_xticklabels(report.arms)
    ax.set_ylabel("test MSE (standardized)")
    ax.set_title(f"{report.dataset}, horizon {report.horizon}")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_forecast(
    timestamps,
    truth: np.ndarray,
    prediction: np.ndarray,
    channel_names: list[str],
    path: str,
    max_channels: int = 4,
) -> None:
    """Truth-vs-prediction overlay for the first channels of one window."""
    k = min(max_channels, truth.shape[1])
    fig, axes = plt.subplots(k, 1, figsize=(7, 2.2 * k), sharex=True, squeeze=False)
    xs = np.arange(truth.shape[0])
    for c in range(k):
        ax = axes[c][0]
        ax.plot(xs, truth[:, c], label="truth", color="#333333", linewidth=1.2)
        ax.plot(xs, prediction[:, c], label="prediction", color="#1f77b4", linewidth=1.2)
        ax.set_ylabel(channel_names[c])
        ax.grid(True, alpha=0.3)
        if c == 0:
            ax.legend(loc="upper right")
    axes[-1][0].set_xlabel(f"horizon step (from {timestamps[0]})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

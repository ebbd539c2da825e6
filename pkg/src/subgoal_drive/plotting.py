"""PNG figures written by ``report`` and ``balance`` next to their CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def steer_histograms(pre, post, path) -> None:
    n = len(pre)
    centers = -1.0 + (np.arange(n) + 0.5) * 2.0 / n
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5), sharex=True)
    for ax, counts, title in zip(axes, (pre, post), ("before balancing", "after balancing")):
        ax.bar(centers, counts, width=2.0 / n)
        ax.set_yscale("symlog")
        ax.set_title(title)
        ax.set_xlabel("steer")
    axes[0].set_ylabel("samples")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def loss_curves(curves: dict, path) -> None:
    """``curves`` maps run name to TrainReport rows."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5), sharex=True)
    for name, rows in curves.items():
        ep = [r["epoch"] for r in rows]
        for ax, key in zip(axes, ("steer_loss", "throttle_loss", "total")):
            ax.plot(ep, [r[key] for r in rows], marker="o", ms=3, label=name)
    for ax, key in zip(axes, ("steer loss", "throttle loss", "total loss")):
        ax.set_title(key)
        ax.set_xlabel("epoch")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def metric_bars(rows, path) -> None:
    names = [r["run"] for r in rows]
    x = np.arange(len(rows))

    def val(r, k):
        v = r[k]
        return np.nan if v in (None, "undefined") else float(v)

    fig, axes = plt.subplots(1, 2, figsize=(max(6, 1.2 * len(rows) + 4), 3.8))
    axes[0].bar(x - 0.2, [val(r, "success_rate") for r in rows], 0.4, label="success")
    axes[0].bar(x + 0.2, [val(r, "normal_driving_rate") for r in rows], 0.4, label="normal driving")
    axes[0].set_ylim(0, 100)
    axes[0].set_ylabel("%")
    axes[0].legend(fontsize=7)
    for i, cat in enumerate(("vehicle", "pedestrian", "other")):
        axes[1].bar(x + (i - 1) * 0.27, [val(r, f"collision_{cat}_per_km") for r in rows], 0.27, label=cat)
    axes[1].set_ylabel("collisions / km")
    axes[1].legend(fontsize=7)
    for ax in axes:
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)

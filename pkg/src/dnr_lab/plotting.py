"""PNG figures written next to the CSV reports (Agg backend, no timestamps)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG text chunks default to the matplotlib version; dropping them keeps
# files byte-identical across reruns.
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(Path(path), format="png", dpi=100, metadata=_META)
    plt.close(fig)


def plot_history(history, path, title: str = "training") -> None:
    epochs = history.column("epoch")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name in ("l_direct", "l_z", "l_theta", "l_x"):
        col = history.column(name).astype(float)
        if np.isfinite(col).any():
            ax1.plot(epochs, col, label=name)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, history.column("val_ndcg"), color="k")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation NDCG@K")
    boundary = [e for e, p in zip(epochs, history.phases) if p == "warmup"]
    if boundary and len(boundary) < len(epochs):
        for ax in (ax1, ax2):
            ax.axvline(max(boundary) + 0.5, color="grey", ls=":", lw=1)
    fig.suptitle(title)
    _save(fig, path)


def plot_sweep(axis: str, values: Sequence[float], means: Sequence[float], stds: Sequence[float], path, metric="NDCG@6") -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.errorbar(values, means, yerr=stds, marker="o", capsize=3)
    ax.set_xlabel(axis)
    ax.set_ylabel(f"mean {metric}")
    _save(fig, path)


def plot_noise(edges: np.ndarray, series: dict[str, np.ndarray], path) -> None:
    centers = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, probs in series.items():
        ax.plot(centers, np.asarray(probs) / width, label=name, drawstyle="steps-mid")
    ax.set_xlabel("noise value")
    ax.set_ylabel("density")
    ax.legend(fontsize=8)
    _save(fig, path)

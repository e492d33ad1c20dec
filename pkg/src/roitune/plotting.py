"""Figures written next to the CSV outputs of the CLI."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def loss_curve(path, losses: Sequence[float], lrs: Sequence[float] | None = None, title: str = "training loss"):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, color="tab:blue", lw=1.5)
    ax.set_xlabel("step")
    ax.set_ylabel("masked NLL")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if lrs is not None:
        ax2 = ax.twinx()
        ax2.plot(steps, lrs, color="tab:orange", lw=1, ls="--")
        ax2.set_ylabel("learning rate", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def roi_heatmap(path, grid: np.ndarray, title: str = "RoIAlign output (channel mean)"):
    """``grid`` is P x P (already reduced over channels)."""
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(grid, cmap="viridis", interpolation="nearest")
    ax.set_title(title)
    ax.set_xlabel("bin x")
    ax.set_ylabel("bin y")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)

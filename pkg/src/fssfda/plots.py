"""Raster figures: per-domain label distributions and SND-vs-accuracy scatter."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import DomainDataset, empirical_label_distribution  # noqa: E402


def plot_label_distributions(domains: Sequence[DomainDataset], out_path: str | Path, title: str | None = None) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n = len(domains)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 2.8), sharey=True, squeeze=False)
    for ax, ds in zip(axes[0], domains):
        probs = empirical_label_distribution(ds).probs
        ax.bar(np.arange(len(probs)), probs, width=0.8)
        ax.set_title(ds.domain_id)
        ax.set_xlabel("class index")
    axes[0][0].set_ylabel("normalized frequency")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def scatter_snd_accuracy(points: Sequence[tuple[float, float]], lrs: Sequence[float], out_path: str | Path,
                         title: str | None = None) -> Path:
    """One marker per candidate; brighter markers mean smaller learning rates."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    snd = np.array([p[0] for p in points])
    acc = np.array([p[1] for p in points]) * 100
    shade = -np.log10(np.asarray(lrs))
    fig, ax = plt.subplots(figsize=(4, 3.2))
    sc = ax.scatter(snd, acc, c=shade, cmap="viridis", edgecolors="k", linewidths=0.5)
    fig.colorbar(sc, ax=ax, label="-log10(lr)")
    ax.set_xlabel("SND")
    ax.set_ylabel("accuracy (%)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path

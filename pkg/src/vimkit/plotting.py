"""Figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curves(history: list[dict], path, keys=("loss",), smooth: float = 0.05, title: str = "") -> Path:
    """Raw (faint) and smoothed curves for each key present in ``history``."""
    from .train import smoothed

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in keys:
        pts = [(r["step"], r[key]) for r in history if key in r]
        if not pts:
            continue
        steps, vals = map(np.asarray, zip(*pts))
        (line,) = ax.plot(steps, vals, alpha=0.25, lw=0.8)
        ax.plot(steps, smoothed(vals, smooth), color=line.get_color(), lw=1.5, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def image_grid(images: np.ndarray, path, ncols: int = 8, titles=None) -> Path:
    """Tile images [N, H, W, 3] in [0, 1] into one figure."""
    images = np.clip(np.asarray(images), 0.0, 1.0)
    n = len(images)
    ncols = max(1, min(ncols, n))
    nrows = -(-n // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.2 * ncols, 1.2 * nrows), squeeze=False)
    for i, ax in enumerate(axes.flat):
        ax.axis("off")
        if i < n:
            ax.imshow(images[i], interpolation="nearest")
            if titles is not None:
                ax.set_title(str(titles[i]), fontsize=7)
    return _save(fig, path)


def reconstruction_pairs(originals: np.ndarray, recons: np.ndarray, path, ncols: int = 8) -> Path:
    """Originals on odd rows, reconstructions below them."""
    n = min(len(originals), len(recons), ncols * 4)
    rows = []
    for s in range(0, n, ncols):
        rows.extend([originals[s:s + ncols], recons[s:s + ncols]])
    return image_grid(np.concatenate(rows), path, ncols=ncols)


def probe_sweep(table: list[tuple[int, float]], path, chance: float | None = None) -> Path:
    blocks, accs = zip(*table)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(blocks, np.asarray(accs) * 100, marker="o")
    if chance is not None:
        ax.axhline(chance * 100, ls="--", color="gray", lw=1, label="chance")
        ax.legend(frameon=False)
    ax.set_xlabel("block")
    ax.set_ylabel("linear probe top-1 (%)")
    ax.set_xticks(list(blocks))
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def usage_bars(counts: dict[str, float], path, ylabel: str = "fraction of codes used") -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(list(counts), list(counts.values()))
    ax.set_ylabel(ylabel)
    return _save(fig, path)

"""PNG figures for reports: loss curves, prediction scatter, split x seed grids."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(curve, path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(1, len(curve) + 1), curve, lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def prediction_scatter(pred, mos, path, title: str = "") -> Path:
    pred = np.asarray(pred, dtype=float)
    mos = np.asarray(mos, dtype=float)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(mos, pred, s=14, alpha=0.7)
    lo = float(min(pred.min(), mos.min()))
    hi = float(max(pred.max(), mos.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("MOS")
    ax.set_ylabel("prediction")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def metric_grid(values, split_ids, seeds, path, name: str = "SROCC") -> Path:
    """Heatmap of a split x seed metric grid; NaN cells show blank."""
    grid = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(1.0 + 0.55 * len(seeds), 1.0 + 0.5 * len(split_ids)))
    im = ax.imshow(np.ma.masked_invalid(grid), cmap="viridis", vmin=-1.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(len(seeds)), [str(s) for s in seeds])
    ax.set_yticks(range(len(split_ids)), [str(s) for s in split_ids])
    ax.set_xlabel("sampling seed")
    ax.set_ylabel("split")
    ax.set_title(f"{name}, mean {np.nanmean(grid):.3f}" if np.isfinite(grid).any() else name)
    fig.colorbar(im, ax=ax, fraction=0.05)
    return _save(fig, path)


def stage_timing(timings: dict, path) -> Path:
    """Bar chart of total seconds per preprocessing stage."""
    fig, ax = plt.subplots(figsize=(4, 3))
    names = list(timings)
    ax.bar(names, [timings[k] for k in names])
    ax.set_ylabel("seconds")
    ax.set_title("preprocessing time by stage")
    return _save(fig, path)

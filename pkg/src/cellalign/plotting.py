"""Minimal SVG renderings of concordance scatter plots and regional heatmaps.

Figures are drawn with matplotlib's Agg backend and saved with a fixed hash
salt and no date metadata, so identical data give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from numpy.typing import ArrayLike  # noqa: E402

from .evaluation import RegionalGrid  # noqa: E402

__all__ = ["scatter_svg", "heatmap_svg"]

_RC = {"svg.hashsalt": "cellalign", "svg.fonttype": "none"}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def scatter_svg(x: ArrayLike, y: ArrayLike, path: str | Path, *, xlabel: str = "source",
                ylabel: str = "target", title: str | None = None) -> None:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(x, y, s=4, alpha=0.6, linewidths=0)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def heatmap_svg(grid: RegionalGrid, path: str | Path, *, title: str | None = None,
                vmin: float = 0.0, vmax: float = 1.0) -> None:
    """Heatmap of a regional grid, rows increasing upward; empty bins left blank."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 4))
        ox, oy = grid.origin
        g = grid.grid_size
        rows, cols = grid.shape
        im = ax.imshow(np.ma.masked_invalid(grid.values), origin="lower", cmap="coolwarm",
                       vmin=vmin, vmax=vmax, extent=(ox, ox + cols * g, oy, oy + rows * g))
        fig.colorbar(im, ax=ax)
        ax.set_xlabel("x (um)")
        ax.set_ylabel("y (um)")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)

"""Density gating, window sampling and proximity graphs for graph matching."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .errors import EmptyInput, InvalidInput, MissingFeature, NoDenseRegion
from .geometry import Transform
from .io import CellTable

logger = logging.getLogger(__name__)

__all__ = [
    "DensityMap",
    "WindowPair",
    "CellGraph",
    "kde_density",
    "sample_windows",
    "window_mask",
    "build_graph",
]

# Gaussian tails beyond this many bandwidths contribute < 3e-18 of the self term.
_KDE_CUTOFF = 9.0


@dataclass(frozen=True, eq=False)
class DensityMap:
    """Per-cell Gaussian KDE value divided by its maximum over the cells."""

    values: NDArray[np.float64]
    bandwidth: float

    def __len__(self) -> int:
        return len(self.values)

    def gate(self, threshold: float = 0.5) -> NDArray[np.int64]:
        return np.flatnonzero(self.values >= threshold)


def kde_density(points: ArrayLike | CellTable, bandwidth: float = 25.0) -> DensityMap:
    """Gaussian kernel density at every cell over all cells, max-normalized.

    The kernel is truncated at nine bandwidths using a k-d tree, so large
    tables stay linear in the number of neighbouring pairs.
    """
    xy = points.xy if isinstance(points, CellTable) else np.asarray(points, dtype=float).reshape(-1, 2)
    if len(xy) == 0:
        raise EmptyInput("density of an empty point set")
    if not bandwidth > 0:
        raise InvalidInput(f"bandwidth must be positive, got {bandwidth}")
    n = len(xy)
    density = np.ones(n)
    pairs = cKDTree(xy).query_pairs(_KDE_CUTOFF * bandwidth, output_type="ndarray")
    if len(pairs):
        d2 = np.sum((xy[pairs[:, 0]] - xy[pairs[:, 1]]) ** 2, axis=1)
        w = np.exp(-d2 / (2.0 * bandwidth**2))
        density += np.bincount(pairs[:, 0], weights=w, minlength=n)
        density += np.bincount(pairs[:, 1], weights=w, minlength=n)
    return DensityMap(density / density.max(), float(bandwidth))


@dataclass(frozen=True, eq=False)
class WindowPair:
    """A source sampling window and its coarse-mapped counterpart in the target."""

    source_center: NDArray[np.float64]
    target_center: NDArray[np.float64]
    source_size: float = 50.0
    target_size: float = 150.0
    anchor: int = -1

    def to_dict(self) -> dict:
        return {"source_center": [float(v) for v in self.source_center],
                "target_center": [float(v) for v in self.target_center],
                "source_size": self.source_size, "target_size": self.target_size,
                "anchor": self.anchor}


def sample_windows(points: ArrayLike | CellTable, density: DensityMap, coarse: Transform,
                   count: int = 8, seed: int = 0, *, gate: float = 0.5,
                   source_size: float = 50.0, target_size: float = 150.0,
                   min_separation: float | None = None) -> list[WindowPair]:
    """Pick ``count`` dense cells as window centres and map them with ``coarse``.

    Candidates are the cells with density >= ``gate``, visited in a seeded
    random order; a candidate is accepted when it lies at least
    ``min_separation`` (default: the source window size) from every accepted
    centre. If that leaves fewer than ``count`` windows, the remaining slots
    go to the rejected candidates farthest from the accepted set.
    """
    xy = points.xy if isinstance(points, CellTable) else np.asarray(points, dtype=float).reshape(-1, 2)
    if len(density) != len(xy):
        raise InvalidInput("density map and point set differ in length")
    if count < 1:
        raise InvalidInput(f"window count must be positive, got {count}")
    sep = source_size if min_separation is None else min_separation
    eligible = density.gate(gate)
    if eligible.size == 0:
        raise NoDenseRegion(f"no cell has density >= {gate}")
    rng = np.random.default_rng(seed)
    order = eligible[rng.permutation(eligible.size)]

    chosen: list[int] = []
    for idx in order:
        if len(chosen) == count:
            break
        if all(math.dist(xy[idx], xy[c]) >= sep for c in chosen):
            chosen.append(int(idx))
    if len(chosen) < count:
        taken = set(chosen)
        remaining = [int(i) for i in order if i not in taken]
        while len(chosen) < count and remaining:
            d = np.min(np.linalg.norm(xy[remaining][:, None, :] - xy[chosen][None, :, :], axis=2), axis=1)
            pick = remaining.pop(int(np.argmax(d)))
            chosen.append(pick)
        logger.info("only %d well-separated window centres; filled best-effort", len(chosen))

    centers = xy[chosen]
    mapped = coarse.apply(centers)
    return [WindowPair(centers[i].copy(), mapped[i].copy(), source_size, target_size, chosen[i])
            for i in range(len(chosen))]


def window_mask(points: ArrayLike, center: ArrayLike, size: float) -> NDArray[np.bool_]:
    """Cells inside the axis-aligned square of side ``size`` around ``center``."""
    xy = np.asarray(points, dtype=float).reshape(-1, 2)
    half = size / 2.0
    return np.all(np.abs(xy - np.asarray(center, dtype=float)) <= half, axis=1)


@dataclass(frozen=True, eq=False)
class CellGraph:
    """Undirected proximity graph over the cells of one window.

    ``index`` holds each node's row in the originating table, ``edges`` the
    node pairs ``(i, j)`` with ``i < j``.
    """

    ids: tuple[str, ...]
    index: NDArray[np.int64]
    positions: NDArray[np.float64]
    features: NDArray[np.float64]
    feature_names: tuple[str, ...]
    edges: NDArray[np.int64]
    lengths: NDArray[np.float64]

    @property
    def n_nodes(self) -> int:
        return len(self.ids)

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def proximity_edges(positions: NDArray[np.float64], threshold: float) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    """All pairs ``i < j`` closer than ``threshold`` (strictly)."""
    if len(positions) < 2:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    pairs = cKDTree(positions).query_pairs(threshold, output_type="ndarray")
    pairs = np.sort(pairs, axis=1)
    lengths = np.linalg.norm(positions[pairs[:, 0]] - positions[pairs[:, 1]], axis=1)
    keep = lengths < threshold
    pairs, lengths = pairs[keep], lengths[keep]
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order].astype(np.int64), lengths[order]


def build_graph(cells: CellTable, center: ArrayLike | None = None, size: float | None = None,
                edge_threshold: float = 15.0,
                feature_names: Sequence[str] = ("perimeter", "solidity"),
                feature_values: NDArray[np.float64] | None = None) -> CellGraph:
    """Proximity graph over the cells inside a square window.

    With no ``center``/``size`` every cell of ``cells`` becomes a node.
    ``feature_values`` may supply an already-standardized ``(N, F)`` matrix
    aligned with ``cells``; otherwise the named features are read from the
    table and a missing value raises :class:`MissingFeature`.
    """
    if center is None:
        idx = np.arange(len(cells))
    else:
        if size is None or not size > 0:
            raise InvalidInput("window size must be positive")
        idx = np.flatnonzero(window_mask(cells.xy, center, size))
    names = tuple(feature_names)
    if feature_values is None:
        for name in names:
            col = cells.features.get(name)
            if col is None:
                raise MissingFeature(cells.ids[idx[0]] if idx.size else cells.ids[0], name)
            bad = idx[np.isnan(col[idx])]
            if bad.size:
                raise MissingFeature(cells.ids[bad[0]], name)
        feats = np.column_stack([cells.features[n][idx] for n in names]) if names else np.zeros((idx.size, 0))
    else:
        feats = np.asarray(feature_values, dtype=float)[idx]
    pos = cells.xy[idx]
    edges, lengths = proximity_edges(pos, edge_threshold)
    return CellGraph(tuple(cells.ids[i] for i in idx), idx, pos, feats, names, edges, lengths)

"""Alignment accuracy against landmarks, feature concordance and regional composition."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Hashable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import stats
from scipy.spatial import cKDTree

from .errors import (EmptyInput, GridMismatch, InvalidInput, MissingFeature, MissingLabel,
                     TooFewLandmarks, UndefinedCorrelation)
from .geometry import AffineTransform, RigidTransform, Transform
from .io import CellTable, LandmarkSet

__all__ = [
    "EvaluationReport",
    "evaluate",
    "angle_of",
    "angular_difference",
    "Census",
    "Pairing",
    "nearest_pairing",
    "default_radius",
    "pearson",
    "FeatureCorrelation",
    "ConcordanceReport",
    "concordance",
    "RegionalGrid",
    "regional_composition",
    "regional_concordance",
]


# --- landmark accuracy -------------------------------------------------------

@dataclass(frozen=True)
class EvaluationReport:
    delta_d: float
    delta_t: float
    delta_theta: float
    per_landmark: tuple[tuple[float, float], ...]

    def to_dict(self, degrees: bool = False) -> dict[str, Any]:
        d: dict[str, Any] = {"delta_d_um": self.delta_d, "delta_t_um": self.delta_t}
        if degrees:
            d["delta_theta_deg"] = math.degrees(self.delta_theta)
        else:
            d["delta_theta_rad"] = self.delta_theta
        d["per_landmark"] = [{"d_gt_um": a, "d_est_um": b} for a, b in self.per_landmark]
        return d


def angle_of(t: Transform) -> float:
    """Rotation angle of a rigid transform, or of an affine's closest rotation."""
    if isinstance(t, RigidTransform):
        return t.theta
    if isinstance(t, AffineTransform):
        return t.rotation_angle
    raise InvalidInput(f"not a transform: {type(t).__name__}")


def angular_difference(a: float, b: float) -> float:
    """Smallest absolute difference between two angles, in ``[0, pi]``."""
    d = math.remainder(a - b, 2.0 * math.pi)
    return min(abs(d), math.pi)


def evaluate(landmarks: LandmarkSet, estimated: Transform, ground_truth: Transform) -> EvaluationReport:
    """Compare an estimated transform with the ground truth on landmark pairs.

    ``d_i`` is the residual of landmark ``i`` under the ground truth, ``d'_i``
    under the estimate; ``delta_d`` averages ``|d_i - d'_i|``. ``delta_t``
    compares translation magnitudes and ``delta_theta`` rotation angles.
    """
    if landmarks is None or len(landmarks) == 0:
        raise TooFewLandmarks("no landmarks to evaluate")
    d_gt = np.linalg.norm(ground_truth.apply(landmarks.source) - landmarks.target, axis=1)
    d_est = np.linalg.norm(estimated.apply(landmarks.source) - landmarks.target, axis=1)
    delta_d = math.fsum(np.abs(d_gt - d_est)) / len(d_gt)
    delta_t = abs(estimated.translation_magnitude() - ground_truth.translation_magnitude())
    delta_theta = angular_difference(angle_of(estimated), angle_of(ground_truth))
    per = tuple((float(a), float(b)) for a, b in zip(d_gt, d_est))
    return EvaluationReport(delta_d, delta_t, delta_theta, per)


# --- nearest-cell pairing ----------------------------------------------------

@dataclass(frozen=True)
class Census:
    """Source cells by how many sources share their nearest target cell.

    ``n0``: no target within the radius; ``n1``: the nearest target is
    claimed by this source alone; ``n_multi``: the nearest target is claimed
    by several sources.
    """

    n0: int
    n1: int
    n_multi: int

    @property
    def total(self) -> int:
        return self.n0 + self.n1 + self.n_multi

    def to_dict(self) -> dict[str, int]:
        return {"n0": self.n0, "n1": self.n1, "n_multi": self.n_multi}


@dataclass(frozen=True, eq=False)
class Pairing:
    nearest: NDArray[np.int64]      # target row per source row, -1 for none
    distance: NDArray[np.float64]   # inf where nearest == -1
    unique: NDArray[np.bool_]       # N=1 source rows
    census: Census
    radius: float

    def unique_pairs(self) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
        rows = np.flatnonzero(self.unique)
        return rows, self.nearest[rows]


def default_radius(target: CellTable | ArrayLike) -> float:
    """Half the median nearest-neighbour spacing of the target cells."""
    xy = target.xy if isinstance(target, CellTable) else np.asarray(target, dtype=float).reshape(-1, 2)
    if len(xy) < 2:
        return math.inf
    dist, _ = cKDTree(xy).query(xy, k=2)
    return 0.5 * float(np.median(dist[:, 1]))


def nearest_pairing(source_mapped: CellTable, target: CellTable,
                    radius: float | None = None) -> Pairing:
    """Pair every (already mapped) source cell with its nearest target cell.

    ``radius=None`` uses :func:`default_radius`; ``math.inf`` pairs with the
    nearest cell however far away it is.
    """
    if len(source_mapped) == 0 or len(target) == 0:
        raise EmptyInput("nearest pairing needs non-empty source and target tables")
    r = default_radius(target) if radius is None else float(radius)
    if not r > 0:
        raise InvalidInput(f"radius must be positive, got {radius}")
    dist, idx = cKDTree(target.xy).query(source_mapped.xy, k=1, distance_upper_bound=r)
    found = np.isfinite(dist)
    nearest = np.where(found, idx, -1).astype(np.int64)
    claims = np.bincount(nearest[found], minlength=len(target))
    unique = found & (claims[np.where(found, nearest, 0)] == 1)
    n0 = int(np.count_nonzero(~found))
    n1 = int(np.count_nonzero(unique))
    census = Census(n0, n1, len(source_mapped) - n0 - n1)
    return Pairing(nearest, np.where(found, dist, np.inf), unique, census, r)


# --- correlation -------------------------------------------------------------

def pearson(x: ArrayLike, y: ArrayLike) -> tuple[float, float]:
    """Sample Pearson correlation and its two-sided p-value.

    The p-value refers ``t = r sqrt((n - 2) / (1 - r^2))`` to Student's t
    with ``n - 2`` degrees of freedom.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != y.shape:
        raise InvalidInput(f"length mismatch: {x.size} vs {y.size}")
    n = x.size
    if n < 3:
        raise UndefinedCorrelation(f"need at least 3 pairs, got {n}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInput("correlation inputs must be finite")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("a variable has zero variance")
    r = math.fsum(dx * dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return r, min(1.0, max(0.0, p))


@dataclass(frozen=True)
class FeatureCorrelation:
    source_feature: str
    target_feature: str
    r: float | None
    p: float | None
    n: int
    note: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"source_feature": self.source_feature, "target_feature": self.target_feature,
                "r": self.r, "p": self.p, "n": self.n, "note": self.note}


@dataclass(frozen=True, eq=False)
class ConcordanceReport:
    features: tuple[FeatureCorrelation, ...]
    census: Census
    radius: float
    # (source_feature, target_feature) -> (x values, y values) over N=1 pairs
    scatter: Mapping[tuple[str, str], tuple[NDArray[np.float64], NDArray[np.float64]]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"features": [f.to_dict() for f in self.features],
                "census": self.census.to_dict(),
                "radius_um": self.radius if math.isfinite(self.radius) else None}


def concordance(source_mapped: CellTable, target: CellTable,
                feature_pairs: Sequence[tuple[str, str]] | None = None,
                radius: float | None = None) -> ConcordanceReport:
    """Correlate features over uniquely paired (N=1) cells.

    ``feature_pairs`` lists ``(source_name, target_name)``; by default every
    feature present in both tables is paired with itself. A pair whose
    correlation is undefined is reported with ``r = p = None`` and a note.
    """
    pairing = nearest_pairing(source_mapped, target, radius)
    if feature_pairs is None:
        shared = sorted(set(source_mapped.features) & set(target.features))
        feature_pairs = [(n, n) for n in shared]
    rows, cols = pairing.unique_pairs()
    results = []
    scatter = {}
    for fs, ft in feature_pairs:
        if fs not in source_mapped.features:
            raise MissingFeature(source_mapped.ids[0], fs)
        if ft not in target.features:
            raise MissingFeature(target.ids[0], ft)
        x = source_mapped.features[fs][rows]
        y = target.features[ft][cols]
        ok = np.isfinite(x) & np.isfinite(y)
        x, y = x[ok], y[ok]
        scatter[(fs, ft)] = (x, y)
        try:
            r, p = pearson(x, y)
            results.append(FeatureCorrelation(fs, ft, r, p, int(x.size)))
        except UndefinedCorrelation as exc:
            results.append(FeatureCorrelation(fs, ft, None, None, int(x.size), str(exc)))
    return ConcordanceReport(tuple(results), pairing.census, pairing.radius, scatter)


# --- regional composition ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class RegionalGrid:
    """Values on a square grid; ``NaN`` marks bins with no value.

    ``values[row, col]`` covers ``x in [ox + col*g, ox + (col+1)*g)`` and
    ``y in [oy + row*g, oy + (row+1)*g)``.
    """

    origin: tuple[float, float]
    grid_size: float
    values: NDArray[np.float64]
    counts: NDArray[np.int64] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def same_geometry(self, other: RegionalGrid) -> bool:
        return (self.shape == other.shape and self.grid_size == other.grid_size
                and self.origin == other.origin)

    def occupied(self) -> NDArray[np.bool_]:
        return ~np.isnan(self.values)

    def cells(self) -> list[tuple[int, int, float]]:
        """``(row, col, value)`` for every bin holding a value."""
        rr, cc = np.nonzero(self.occupied())
        return [(int(r), int(c), float(self.values[r, c])) for r, c in zip(rr, cc)]


def regional_composition(cells: CellTable, grid_size: float = 100.0, positive_label: Hashable = "tumor",
                         *, origin: ArrayLike | None = None,
                         shape: tuple[int, int] | None = None) -> RegionalGrid:
    """Fraction of cells labelled ``positive_label`` in each occupied grid bin.

    The grid starts at the cells' minimum corner unless ``origin`` is given
    and is just large enough to hold them unless ``shape`` (rows, cols) is
    given; cells falling outside a fixed ``shape`` are ignored. Passing the
    origin and shape of another grid makes the two comparable.
    """
    if not grid_size > 0:
        raise InvalidInput(f"grid_size must be positive, got {grid_size}")
    if len(cells) == 0:
        raise EmptyInput("no cells")
    labels = cells.labels
    if labels is None:
        raise MissingLabel(cells.ids[0])
    for cid, lab in zip(cells.ids, labels):
        if lab is None or lab == "":
            raise MissingLabel(cid)
    anchor = cells.xy.min(axis=0) if origin is None else np.asarray(origin, dtype=float).reshape(2)
    ij = np.floor((cells.xy - anchor) / grid_size).astype(np.int64)
    col, row = ij[:, 0], ij[:, 1]
    if shape is None:
        shape = (int(row.max()) + 1, int(col.max()) + 1)
        inside = np.ones(len(cells), dtype=bool)
    else:
        inside = (row >= 0) & (col >= 0) & (row < shape[0]) & (col < shape[1])
    positive = np.array([lab == positive_label for lab in labels], dtype=float)
    flat = row[inside] * shape[1] + col[inside]
    size = shape[0] * shape[1]
    counts = np.bincount(flat, minlength=size)
    hits = np.bincount(flat, weights=positive[inside], minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return RegionalGrid((float(anchor[0]), float(anchor[1])), float(grid_size),
                        values.reshape(shape), counts.reshape(shape))


def regional_concordance(a: RegionalGrid, b: RegionalGrid) -> RegionalGrid:
    """Per-bin similarity ``1 - |p_a - p_b|``; bins missing on either side stay ``NaN``."""
    if not a.same_geometry(b):
        raise GridMismatch(f"grids differ: {a.shape}@{a.origin}/{a.grid_size} vs "
                           f"{b.shape}@{b.origin}/{b.grid_size}")
    sim = 1.0 - np.abs(a.values - b.values)
    return RegionalGrid(a.origin, a.grid_size, sim)

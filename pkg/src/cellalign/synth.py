"""Synthetic tissue-like cell patterns with known transform and correspondence.

Randomness comes from numpy's ``PCG64`` bit generator seeded with the
scenario seed, so a scenario is reproducible bit-for-bit on one numpy
version.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError
from .geometry import RigidTransform
from .io import CellTable, LandmarkSet

__all__ = ["SynthScenario", "SynthResult", "generate", "PRNG_ALGORITHM"]

PRNG_ALGORITHM = "numpy.PCG64"


@dataclass(frozen=True)
class SynthScenario:
    """Parameters of one synthetic source/target pair.

    ``cluster_count == 0`` draws centroids uniformly over the square
    ``[0, extent]^2``; otherwise a Neyman-Scott process places
    ``cluster_count`` uniform parent centres with Gaussian offspring of
    spread ``cluster_sigma``. ``min_spacing`` thins centroids closer than
    that distance, mimicking non-overlapping nuclei. ``feature_noise`` is
    the relative Gaussian noise applied to a matched cell's features in the
    target. A positive ``tumor_fraction`` labels each source cell ``tumor``
    with that probability (``stroma`` otherwise); matched target cells keep
    their source label.
    """

    n_points: int = 1000
    extent: float = 500.0
    cluster_count: int = 0
    cluster_sigma: float = 15.0
    transform: RigidTransform = field(default_factory=RigidTransform)
    jitter_sigma: float = 0.0
    dropout_rate: float = 0.0
    spurious_rate: float = 0.0
    feature_noise: float = 0.0
    min_spacing: float = 0.0
    tumor_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_points < 2:
            raise ConfigError("n_points must be at least 2")
        if not self.extent > 0:
            raise ConfigError("extent must be positive")
        if self.cluster_count < 0:
            raise ConfigError("cluster_count must be nonnegative")
        if self.cluster_count and not self.cluster_sigma > 0:
            raise ConfigError("cluster_sigma must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.spurious_rate >= 0.0:
            raise ConfigError(f"spurious_rate must be nonnegative, got {self.spurious_rate}")
        if not 0.0 <= self.tumor_fraction <= 1.0:
            raise ConfigError(f"tumor_fraction must be in [0, 1], got {self.tumor_fraction}")
        if self.jitter_sigma < 0 or self.feature_noise < 0 or self.min_spacing < 0:
            raise ConfigError("noise levels and spacing must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transform"] = self.transform.to_dict()
        d["prng"] = PRNG_ALGORITHM
        return d


@dataclass(frozen=True, eq=False)
class SynthResult:
    source: CellTable
    target: CellTable
    truth: dict[str, str]
    transform: RigidTransform

    def landmarks(self, count: int = 8, seed: int = 0) -> LandmarkSet:
        """``count`` randomly chosen truth pairs as (source, target) landmarks."""
        rng = np.random.default_rng(seed)
        src_ids = sorted(self.truth)
        pick = np.sort(rng.choice(len(src_ids), size=min(count, len(src_ids)), replace=False))
        s_idx, t_idx = self.source.index, self.target.index
        chosen = [src_ids[i] for i in pick]
        return LandmarkSet(self.source.xy[[s_idx[c] for c in chosen]],
                           self.target.xy[[t_idx[self.truth[c]] for c in chosen]])


def _draw_centroids(rng: np.random.Generator, n: int, sc: SynthScenario,
                    parents: NDArray[np.float64] | None) -> NDArray[np.float64]:
    if parents is None:
        return rng.uniform(0.0, sc.extent, size=(n, 2))
    which = rng.integers(0, sc.cluster_count, size=n)
    return parents[which] + rng.normal(0.0, sc.cluster_sigma, size=(n, 2))


def _spaced_centroids(rng: np.random.Generator, n: int, sc: SynthScenario,
                      parents: NDArray[np.float64] | None) -> NDArray[np.float64]:
    if sc.min_spacing == 0:
        return _draw_centroids(rng, n, sc, parents)
    r = sc.min_spacing
    grid: dict[tuple[int, int], list[tuple[float, float]]] = {}
    accepted: list[tuple[float, float]] = []
    for _ in range(200):
        for x, y in _draw_centroids(rng, 2 * (n - len(accepted)) + 16, sc, parents):
            gx, gy = math.floor(x / r), math.floor(y / r)
            clear = all((x - px) ** 2 + (y - py) ** 2 >= r * r
                        for i in (gx - 1, gx, gx + 1) for j in (gy - 1, gy, gy + 1)
                        for px, py in grid.get((i, j), ()))
            if clear:
                grid.setdefault((gx, gy), []).append((x, y))
                accepted.append((x, y))
                if len(accepted) == n:
                    return np.array(accepted)
    raise ConfigError(f"cannot place {n} cells with min_spacing={sc.min_spacing}")


def _draw_features(rng: np.random.Generator, n: int) -> dict[str, NDArray[np.float64]]:
    area = rng.lognormal(mean=math.log(45.0), sigma=0.35, size=n)
    elong = rng.uniform(1.0, 2.2, size=n)
    minor = np.sqrt(4.0 * area / (math.pi * elong))
    major = minor * elong
    # Ramanujan's ellipse perimeter, roughened by a per-cell boundary factor.
    a, b = major / 2.0, minor / 2.0
    h = ((a - b) / (a + b)) ** 2
    ellipse = math.pi * (a + b) * (1.0 + 3.0 * h / (10.0 + np.sqrt(4.0 - 3.0 * h)))
    perimeter = ellipse * rng.uniform(1.0, 1.25, size=n)
    solidity = np.clip(rng.beta(18.0, 1.6, size=n), 0.5, 1.0)
    stain = rng.gamma(6.0, 0.05, size=n)
    return {
        "area": area,
        "perimeter": perimeter,
        "solidity": solidity,
        "min_diameter": minor,
        "max_diameter": major,
        "nucleus_stain_mean": stain,
    }


def _perturb(rng: np.random.Generator, feats: dict[str, NDArray[np.float64]],
             noise: float) -> dict[str, NDArray[np.float64]]:
    if noise == 0:
        return {k: v.copy() for k, v in feats.items()}
    out = {}
    for k, v in feats.items():
        noisy = v * (1.0 + noise * rng.standard_normal(len(v)))
        if k == "solidity":
            noisy = np.clip(noisy, 1e-3, 1.0)
        else:
            noisy = np.maximum(noisy, 1e-3 * v)
        out[k] = noisy
    return out


def generate(scenario: SynthScenario) -> SynthResult:
    """Draw a source table and its transformed, degraded target."""
    sc = scenario
    rng = np.random.Generator(np.random.PCG64(sc.seed))
    n = sc.n_points
    parents = None
    if sc.cluster_count:
        parents = rng.uniform(0.0, sc.extent, size=(sc.cluster_count, 2))
    src_xy = _spaced_centroids(rng, n, sc, parents)
    src_feats = _draw_features(rng, n)
    src_ids = tuple(f"s{i:06d}" for i in range(n))

    kept = np.flatnonzero(rng.random(n) >= sc.dropout_rate)
    mapped = sc.transform.apply(src_xy[kept])
    if sc.jitter_sigma > 0:
        mapped = mapped + rng.normal(0.0, sc.jitter_sigma, size=mapped.shape)
    kept_feats = _perturb(rng, {k: v[kept] for k, v in src_feats.items()}, sc.feature_noise)

    n_spurious = int(round(sc.spurious_rate * n))
    spur_xy = sc.transform.apply(_draw_centroids(rng, n_spurious, sc, parents)) if n_spurious else np.zeros((0, 2))
    spur_feats = _draw_features(rng, n_spurious)

    tgt_xy = np.vstack([mapped, spur_xy])
    tgt_feats = {k: np.concatenate([kept_feats[k], spur_feats[k]]) for k in src_feats}
    order = rng.permutation(len(tgt_xy))
    tgt_xy = tgt_xy[order]
    tgt_feats = {k: v[order] for k, v in tgt_feats.items()}
    tgt_ids = tuple(f"t{i:06d}" for i in range(len(tgt_xy)))

    # position in the shuffled target of each row of the unshuffled stack
    slot = np.empty(len(order), dtype=np.int64)
    slot[order] = np.arange(len(order))
    truth = {src_ids[s]: tgt_ids[slot[j]] for j, s in enumerate(kept)}

    src_labels = tgt_labels = None
    if sc.tumor_fraction > 0:
        # Drawn last so that enabling labels leaves every other draw unchanged.
        names = np.array(["stroma", "tumor"])
        src_lab = names[(rng.random(n) < sc.tumor_fraction).astype(int)]
        spur_lab = names[(rng.random(n_spurious) < sc.tumor_fraction).astype(int)]
        tgt_lab = np.concatenate([src_lab[kept], spur_lab])[order]
        src_labels = tuple(str(v) for v in src_lab)
        tgt_labels = tuple(str(v) for v in tgt_lab)

    source = CellTable(src_ids, src_xy, src_feats, labels=src_labels, modality="HE")
    target = CellTable(tgt_ids, tgt_xy, tgt_feats, labels=tgt_labels, modality="MxIF")
    return SynthResult(source, target, truth, sc.transform)

"""Coarse-to-fine cell alignment: CPD, windowed graph matching, LPM, affine fit."""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .cpd import CpdConfig, CpdResult, cpd_rigid
from .errors import (
    ConfigError,
    DegenerateConfiguration,
    EmptyInput,
    InvalidInput,
    TooFewCells,
    WindowsEmpty,
)
from .geometry import AffineTransform, RigidTransform
from .graph_build import WindowPair, build_graph, kde_density, sample_windows
from .io import CellTable
from .matching import MatchSet, build_affinity, hungarian, lpm_filter, rrwm, sinkhorn_greedy
from .transform_fit import fit_affine, residual_rms

logger = logging.getLogger(__name__)

__all__ = [
    "AlignmentConfig",
    "AlignmentResult",
    "SuperCells",
    "align",
    "align_large",
    "supercell_cluster",
    "pool_matches",
]


@dataclass(frozen=True)
class RrwmConfig:
    alpha: float = 0.2
    beta: float = 30.0
    max_iter: int = 300
    tol: float = 1e-6
    sigma_f: float = 1.0
    sigma_e: float = 5.0
    # Compare edges as vectors rotated by the coarse angle rather than by length.
    oriented_edges: bool = True


@dataclass(frozen=True)
class LpmConfig:
    k: int = 8
    lam: float = 0.5


@dataclass(frozen=True)
class AlignmentConfig:
    cpd: CpdConfig = field(default_factory=CpdConfig)
    kde_bandwidth: float = 25.0
    density_gate: float = 0.5
    window_count: int = 8
    src_window: float = 50.0
    tgt_window: float = 150.0
    edge_threshold: float = 15.0
    features: tuple[str, ...] = ("perimeter", "solidity")
    rrwm: RrwmConfig = field(default_factory=RrwmConfig)
    discretize: str = "hungarian"
    score_threshold: float = 0.1
    lpm: LpmConfig = field(default_factory=LpmConfig)
    min_pooled_matches: int = 10
    min_cells: int = 50
    supercell_grid: float | None = None
    threads: int | None = None

    def __post_init__(self) -> None:
        for name in ("kde_bandwidth", "src_window", "tgt_window", "edge_threshold"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.density_gate <= 1.0:
            raise ConfigError("density_gate must be in (0, 1]")
        if self.window_count < 1:
            raise ConfigError("window_count must be at least 1")
        if self.discretize not in ("hungarian", "sinkhorn"):
            raise ConfigError(f"unknown discretization {self.discretize!r}")
        if self.min_pooled_matches < 3:
            raise ConfigError("min_pooled_matches must be at least 3 for an affine fit")
        if self.supercell_grid is not None and not self.supercell_grid > 0:
            raise ConfigError("supercell_grid must be positive")
        object.__setattr__(self, "features", tuple(self.features))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["features"] = list(self.features)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AlignmentConfig:
        d = dict(d)
        d["cpd"] = CpdConfig(**d.get("cpd", {}))
        d["rrwm"] = RrwmConfig(**d.get("rrwm", {}))
        d["lpm"] = LpmConfig(**d.get("lpm", {}))
        if "features" in d:
            d["features"] = tuple(d["features"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    coarse: RigidTransform
    refined: AffineTransform
    matches: MatchSet
    coarse_only: bool
    diagnostics: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"coarse": self.coarse.to_dict(), "refined": self.refined.to_dict(),
                "coarse_only": self.coarse_only, "match_count": len(self.matches),
                "diagnostics": self.diagnostics}


def _thread_count(config: AlignmentConfig) -> int:
    if config.threads is not None:
        return max(1, config.threads)
    env = os.environ.get("CELLALIGN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"CELLALIGN_THREADS must be an integer, got {env!r}") from None
    return min(4, os.cpu_count() or 1)


def standardize(matrix: NDArray[np.float64]) -> NDArray[np.float64]:
    """Column-wise z-score; constant columns are only centred."""
    mu = matrix.mean(axis=0)
    sd = matrix.std(axis=0)
    sd[sd == 0] = 1.0
    return (matrix - mu) / sd


def _match_window(source: CellTable, target: CellTable, f_src: NDArray[np.float64],
                  f_tgt: NDArray[np.float64], window: WindowPair,
                  config: AlignmentConfig, rotation: float) -> tuple[MatchSet, dict[str, Any]]:
    g_src = build_graph(source, window.source_center, window.source_size,
                        config.edge_threshold, config.features, f_src)
    g_tgt = build_graph(target, window.target_center, window.target_size,
                        config.edge_threshold, config.features, f_tgt)
    info: dict[str, Any] = {"source_nodes": g_src.n_nodes, "target_nodes": g_tgt.n_nodes,
                            "source_edges": g_src.n_edges, "target_edges": g_tgt.n_edges}
    if g_src.n_nodes == 0 or g_tgt.n_nodes == 0:
        info.update(matches=0, empty=True)
        return MatchSet(), info
    r = config.rrwm
    aff = build_affinity(g_src, g_tgt, r.sigma_f, r.sigma_e,
                         rotation if r.oriented_edges else None)
    soft = rrwm(aff, alpha=r.alpha, beta=r.beta, max_iter=r.max_iter, tol=r.tol)
    info.update(rrwm_iterations=soft.iterations, rrwm_converged=soft.converged)
    rows = soft.scores.sum(axis=1, keepdims=True)
    rows[rows == 0] = 1.0
    score = soft.scores / rows
    discretize = hungarian if config.discretize == "hungarian" else sinkhorn_greedy
    hard = discretize(score, g_src.ids, g_tgt.ids)
    hard = hard.select(hard.scores >= config.score_threshold)
    info.update(matches=len(hard), empty=False)
    return hard, info


def pool_matches(per_window: Sequence[MatchSet]) -> MatchSet:
    """Merge window match sets into one one-to-one set.

    Conflicts (a source or target cell matched in several windows) keep the
    highest-scoring pair, ties broken by ids; the result is sorted by
    ``(src_id, tgt_id)`` so it does not depend on window completion order.
    """
    candidates = sorted({(s, t, sc) for ms in per_window for s, t, sc in ms},
                        key=lambda c: (-c[2], c[0], c[1]))
    used_s: set = set()
    used_t: set = set()
    kept = []
    for s, t, sc in candidates:
        if s in used_s or t in used_t:
            continue
        used_s.add(s)
        used_t.add(t)
        kept.append((s, t, sc))
    return MatchSet.from_pairs(kept).sorted()


def refine(source: CellTable, target: CellTable, coarse: RigidTransform,
           config: AlignmentConfig, seed: int = 0,
           diagnostics: dict[str, Any] | None = None) -> AlignmentResult:
    """Graph-matching refinement of a coarse transform."""
    diagnostics = {} if diagnostics is None else diagnostics
    density = kde_density(source.xy, config.kde_bandwidth)
    windows = sample_windows(source.xy, density, coarse, config.window_count, seed,
                             gate=config.density_gate, source_size=config.src_window,
                             target_size=config.tgt_window)
    f_src = standardize(source.feature_matrix(config.features))
    f_tgt = standardize(target.feature_matrix(config.features))

    def task(w: WindowPair):
        return _match_window(source, target, f_src, f_tgt, w, config, coarse.theta)

    threads = _thread_count(config)
    if threads > 1 and len(windows) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(task, windows))
    else:
        outcomes = [task(w) for w in windows]
    if all(info["empty"] for _, info in outcomes):
        raise WindowsEmpty("no window produced a pair of non-empty graphs")

    pooled = pool_matches([m for m, _ in outcomes])
    filtered = lpm_filter(pooled, source, target, config.lpm.k, config.lpm.lam)
    coarse_only = len(filtered) < config.min_pooled_matches
    if coarse_only:
        refined = coarse.to_affine()
        fit_rms = None
        logger.warning("only %d matches survived filtering; keeping the coarse transform", len(filtered))
    else:
        s_idx, t_idx = source.index, target.index
        src = source.xy[[s_idx[i] for i in filtered.src_ids]]
        tgt = target.xy[[t_idx[i] for i in filtered.tgt_ids]]
        refined, fit_rms = fit_affine(src, tgt, filtered.scores)

    diagnostics.update(
        windows_used=len(windows),
        windows=[w.to_dict() for w in windows],
        matches_per_window=[info["matches"] for _, info in outcomes],
        window_graphs=[info for _, info in outcomes],
        pooled_count=len(pooled),
        filtered_count=len(filtered),
        lpm_low_confidence=filtered.low_confidence,
        fit_residual_rms_um=fit_rms,
        coarse_only=coarse_only,
    )
    return AlignmentResult(coarse, refined, filtered, coarse_only, diagnostics)


def _check_tables(source: CellTable, target: CellTable, config: AlignmentConfig) -> None:
    for name, table in (("source", source), ("target", target)):
        if len(table) < config.min_cells:
            raise TooFewCells(f"{name} has {len(table)} cells; at least {config.min_cells} required")
        table.feature_matrix(config.features)


def _cpd_diagnostics(res: CpdResult) -> dict[str, Any]:
    return {"cpd_iterations": res.iterations, "cpd_sigma2": res.sigma2,
            "cpd_converged": res.converged, "cpd_loglik": res.final_loglik}


def align(source: CellTable, target: CellTable, config: AlignmentConfig | None = None,
          seed: int = 0) -> AlignmentResult:
    """Align ``source`` cells onto ``target`` cells.

    Rigid CPD on the centroids gives the coarse transform; graph matching in
    density-gated windows yields cell correspondences which, after LPM
    filtering, determine the refined affine transform. When too few matches
    survive, the refined transform is the coarse one and ``coarse_only`` is
    set.
    """
    config = config or AlignmentConfig()
    if config.supercell_grid is not None:
        return align_large(source, target, config, seed)
    _check_tables(source, target, config)
    res = cpd_rigid(source.xy, target.xy, config.cpd, seed=seed)
    return refine(source, target, res.transform, config, seed, _cpd_diagnostics(res))


@dataclass(frozen=True, eq=False)
class SuperCells:
    xy: NDArray[np.float64]
    weights: NDArray[np.float64]
    labels: NDArray[np.int64]
    bins: NDArray[np.int64]

    def __len__(self) -> int:
        return len(self.xy)


def supercell_cluster(points: ArrayLike | CellTable, grid_size: float,
                      origin: ArrayLike | None = None) -> SuperCells:
    """Bin cells on a square grid; each occupied bin becomes one super-cell.

    The grid is anchored at the minimum corner of the points unless
    ``origin`` is given. ``labels[i]`` is the super-cell of cell ``i``;
    super-cells are ordered by bin (row-major in y, then x).
    """
    xy = points.xy if isinstance(points, CellTable) else np.asarray(points, dtype=float).reshape(-1, 2)
    if len(xy) == 0:
        raise EmptyInput("no cells to cluster")
    if not grid_size > 0:
        raise InvalidInput(f"grid_size must be positive, got {grid_size}")
    anchor = xy.min(axis=0) if origin is None else np.asarray(origin, dtype=float)
    cells = np.floor((xy - anchor) / grid_size).astype(np.int64)
    bins, labels = np.unique(cells[:, ::-1], axis=0, return_inverse=True)
    labels = labels.reshape(-1)
    counts = np.bincount(labels, minlength=len(bins)).astype(float)
    sums = np.zeros((len(bins), 2))
    np.add.at(sums, labels, xy)
    return SuperCells(sums / counts[:, None], counts, labels, bins[:, ::-1])


def align_large(source: CellTable, target: CellTable, config: AlignmentConfig | None = None,
                seed: int = 0) -> AlignmentResult:
    """:func:`align` with the CPD stage run on super-cells.

    Super-cell centroids enter CPD with their member counts as replication
    weights; graph matching then proceeds on the original cells.
    """
    config = config or AlignmentConfig(supercell_grid=100.0)
    if config.supercell_grid is None:
        raise ConfigError("align_large needs supercell_grid")
    _check_tables(source, target, config)
    sc_src = supercell_cluster(source.xy, config.supercell_grid)
    sc_tgt = supercell_cluster(target.xy, config.supercell_grid)
    if len(sc_src) < 2 or len(sc_tgt) < 2:
        raise DegenerateConfiguration(
            f"super-cell grid {config.supercell_grid} leaves {len(sc_src)}/{len(sc_tgt)} super-cells; "
            "CPD needs at least 2 per side")
    # Both super-cell sets sit near axis-aligned lattices of spacing g; once
    # the mixture variance drops well below g^2, lattice-to-lattice attraction
    # biases the rotation toward zero. Flooring sigma^2 at g^2 / 2 damps the
    # lattice frequency by exp(-pi^2) while keeping cluster-scale structure.
    floor = 0.5 * config.supercell_grid**2
    cpd_config = dataclasses.replace(config.cpd, min_sigma2=max(config.cpd.min_sigma2, floor))
    res = cpd_rigid(sc_src.xy, sc_tgt.xy, cpd_config, seed=seed,
                    source_weights=sc_src.weights, target_weights=sc_tgt.weights)
    diag = _cpd_diagnostics(res)
    diag.update(supercells_source=len(sc_src), supercells_target=len(sc_tgt))
    return refine(source, target, res.transform, config, seed, diag)

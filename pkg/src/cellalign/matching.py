"""Graph matching between two cell graphs and filtering of the putative matches.

The affinity matrix is indexed by candidate assignments ``(i, a)`` with
``i`` a source node and ``a`` a target node, flattened row-major as
``i * n2 + a``. It is stored sparse because only pairs of existing edges
carry pairwise affinity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Any, Hashable, Iterator, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import (
    DegenerateAffinity,
    EmptyInput,
    FeatureMismatch,
    InvalidInput,
    UnknownId,
)

if TYPE_CHECKING:
    from .graph_build import CellGraph

__all__ = [
    "MatchSet",
    "AffinityMatrix",
    "RrwmResult",
    "build_affinity",
    "rrwm",
    "sinkhorn",
    "hungarian",
    "sinkhorn_greedy",
    "lpm_filter",
]


@dataclass(frozen=True, eq=False)
class MatchSet:
    """One-to-one scored correspondences ``src_id -> tgt_id``.

    ``low_confidence`` is set when a filter had too few matches to judge
    them and passed the set through untouched.
    """

    src_ids: tuple[Hashable, ...] = ()
    tgt_ids: tuple[Hashable, ...] = ()
    scores: NDArray[np.float64] = None  # type: ignore[assignment]
    low_confidence: bool = False

    def __post_init__(self) -> None:
        src, tgt = tuple(self.src_ids), tuple(self.tgt_ids)
        scores = np.zeros(len(src)) if self.scores is None else np.array(self.scores, dtype=float).reshape(-1)
        if not len(src) == len(tgt) == len(scores):
            raise InvalidInput("src_ids, tgt_ids and scores must have equal length")
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise InvalidInput("matches must be one-to-one")
        if not np.all(np.isfinite(scores)):
            raise InvalidInput("match scores must be finite")
        scores.setflags(write=False)
        object.__setattr__(self, "src_ids", src)
        object.__setattr__(self, "tgt_ids", tgt)
        object.__setattr__(self, "scores", scores)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[Hashable, Hashable, float]], **kwargs: Any) -> MatchSet:
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs),
                   np.array([p[2] for p in pairs], dtype=float), **kwargs)

    def __len__(self) -> int:
        return len(self.src_ids)

    def __iter__(self) -> Iterator[tuple[Hashable, Hashable, float]]:
        return zip(self.src_ids, self.tgt_ids, (float(s) for s in self.scores))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MatchSet):
            return NotImplemented
        return (self.src_ids == other.src_ids and self.tgt_ids == other.tgt_ids
                and np.array_equal(self.scores, other.scores)
                and self.low_confidence == other.low_confidence)

    @property
    def total(self) -> float:
        return math.fsum(self.scores)

    def pairs(self) -> set[tuple[Hashable, Hashable]]:
        return set(zip(self.src_ids, self.tgt_ids))

    def select(self, mask: ArrayLike) -> MatchSet:
        idx = np.flatnonzero(np.asarray(mask, dtype=bool))
        return replace(self, src_ids=tuple(self.src_ids[i] for i in idx),
                       tgt_ids=tuple(self.tgt_ids[i] for i in idx), scores=self.scores[idx])

    def sorted(self) -> MatchSet:
        order = sorted(range(len(self)), key=lambda i: (self.src_ids[i], self.tgt_ids[i]))
        return replace(self, src_ids=tuple(self.src_ids[i] for i in order),
                       tgt_ids=tuple(self.tgt_ids[i] for i in order), scores=self.scores[order])


@dataclass(frozen=True, eq=False)
class AffinityMatrix:
    K: sp.csr_matrix
    n1: int
    n2: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.K.shape

    def toarray(self) -> NDArray[np.float64]:
        return self.K.toarray()


def build_affinity(g_src: CellGraph, g_tgt: CellGraph, sigma_f: float = 1.0,
                   sigma_e: float = 5.0, rotation: float | None = None) -> AffinityMatrix:
    """Node + edge affinity between two cell graphs.

    Node affinity is ``exp(-|f_i - f_a|^2 / sigma_f^2)`` on the graphs' feature
    vectors (expected to be z-scored already); edge affinity is
    ``exp(-(len_ij - len_ab)^2 / sigma_e^2)`` for every pair of existing edges,
    in both orientations.

    When ``rotation`` (radians) is given, edges are compared as vectors
    instead: ``exp(-|R e_ij - e_ab|^2 / sigma_e^2)`` with ``R`` the rotation
    taking the source frame to the target frame. Length-only affinity cannot
    tell a patch from its mirror image or a rotated copy of a similar patch;
    an approximate rotation from a coarse fit removes that ambiguity.
    """
    n1, n2 = g_src.n_nodes, g_tgt.n_nodes
    if n1 == 0 or n2 == 0:
        raise EmptyInput("both graphs need at least one node")
    if tuple(g_src.feature_names) != tuple(g_tgt.feature_names):
        raise FeatureMismatch(f"feature names differ: {g_src.feature_names} vs {g_tgt.feature_names}")
    f1, f2 = g_src.features, g_tgt.features
    if f1.shape[1] != f2.shape[1]:
        raise FeatureMismatch(f"feature dimension {f1.shape[1]} vs {f2.shape[1]}")

    diff = f1[:, None, :] - f2[None, :, :]
    node = np.exp(-np.einsum("ijk,ijk->ij", diff, diff) / sigma_f**2)
    size = n1 * n2
    K = sp.diags(node.ravel(), format="coo", shape=(size, size))

    e1, l1 = _directed(g_src)
    e2, l2 = _directed(g_tgt)
    if len(e1) and len(e2):
        if rotation is None:
            aff = np.exp(-((l1[:, None] - l2[None, :]) ** 2) / sigma_e**2)
        else:
            c, s = math.cos(rotation), math.sin(rotation)
            v1 = g_src.positions[e1[:, 1]] - g_src.positions[e1[:, 0]]
            v1 = v1 @ np.array([[c, s], [-s, c]])
            v2 = g_tgt.positions[e2[:, 1]] - g_tgt.positions[e2[:, 0]]
            d2 = ((v1[:, None, :] - v2[None, :, :]) ** 2).sum(axis=2)
            aff = np.exp(-d2 / sigma_e**2)
        rows = (e1[:, 0, None] * n2 + e2[None, :, 0]).ravel()
        cols = (e1[:, 1, None] * n2 + e2[None, :, 1]).ravel()
        edge = sp.coo_matrix((aff.ravel(), (rows, cols)), shape=(size, size))
        K = K + edge
    return AffinityMatrix(sp.csr_matrix(K), n1, n2)


def _directed(g: CellGraph) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    e = np.asarray(g.edges, dtype=np.int64).reshape(-1, 2)
    length = np.asarray(g.lengths, dtype=float)
    return np.concatenate([e, e[:, ::-1]]), np.concatenate([length, length])


def _sinkhorn_square(x: NDArray[np.float64], max_iter: int, tol: float) -> tuple[NDArray[np.float64], int, float]:
    """Sinkhorn on an ``n1 x n2`` block (n1 <= n2) implicitly padded to square.

    The ``n2 - n1`` padding rows stay identical throughout, so they are
    carried as one row with a multiplicity instead of being materialized.
    """
    n1, n2 = x.shape
    k = n2 - n1
    pad = np.full(n2, 1e-9)
    x = x.copy()
    dev = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        x /= x.sum(axis=1, keepdims=True)
        pad /= pad.sum()
        colsum = x.sum(axis=0) + k * pad
        x /= colsum
        pad /= colsum
        dev = float(np.max(np.abs(x.sum(axis=1) - 1.0)))
        if k:
            dev = max(dev, abs(float(pad.sum()) - 1.0))
        if dev < tol:
            break
    return x, it, dev


def sinkhorn(m: ArrayLike, max_iter: int = 10_000, tol: float = 1e-9) -> NDArray[np.float64]:
    """Alternate row/column normalization of a nonnegative matrix.

    A rectangular input is padded to square with rows (or columns) of 1e-9;
    the padded square is doubly stochastic on return and the original block
    is returned, so its longer dimension sums to at most one. All-zero rows
    or columns are lifted to 1e-9 so that scaling is defined.
    """
    m = np.array(m, dtype=float)
    if m.ndim != 2 or m.size == 0:
        raise EmptyInput("sinkhorn needs a non-empty 2-D matrix")
    if np.isnan(m).any() or np.isinf(m).any():
        raise InvalidInput("sinkhorn input must be finite")
    if (m < 0).any():
        raise InvalidInput("sinkhorn input must be nonnegative")
    transposed = m.shape[0] > m.shape[1]
    if transposed:
        m = m.T
    m[~m.any(axis=1), :] = 1e-9
    m[:, ~m.any(axis=0)] = 1e-9
    x, _, _ = _sinkhorn_square(m, max_iter, tol)
    return x.T if transposed else x


@dataclass(frozen=True)
class RrwmResult:
    scores: NDArray[np.float64]
    iterations: int
    converged: bool


def rrwm(K: AffinityMatrix | sp.spmatrix | ArrayLike, n1: int | None = None, n2: int | None = None,
         alpha: float = 0.2, beta: float = 30.0, max_iter: int = 300, tol: float = 1e-6,
         sk_iter: int = 20) -> RrwmResult:
    """Reweighted random walk matching.

    Each step takes a random walk ``K x`` on the max-degree-normalized
    affinity, builds the reweighting jump ``sinkhorn(exp(beta * x / max x))``
    and mixes them as ``(1 - alpha) * walk + alpha * jump``. Iteration stops
    once the largest entry change drops below ``tol``.

    Returns the ``n1 x n2`` soft assignment, normalized to sum to one.
    """
    if isinstance(K, AffinityMatrix):
        n1, n2, K = K.n1, K.n2, K.K
    if n1 is None or n2 is None:
        raise InvalidInput("n1 and n2 are required for a raw affinity matrix")
    if not 0.0 < alpha < 1.0:
        raise InvalidInput(f"alpha must lie in (0, 1), got {alpha}")
    if beta <= 0:
        raise InvalidInput(f"beta must be positive, got {beta}")
    K = sp.csr_matrix(K, dtype=float)
    size = n1 * n2
    if K.shape != (size, size):
        raise InvalidInput(f"affinity shape {K.shape} does not match n1*n2={size}")
    degree = np.asarray(K.sum(axis=1)).ravel()
    if K.nnz == 0 or degree.max() <= 0:
        raise DegenerateAffinity("affinity matrix is all zero")
    K = K / degree.max()

    transposed = n1 > n2
    x = np.full(size, 1.0 / size)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        walk = K @ x
        total = walk.sum()
        if total <= 0:
            raise DegenerateAffinity("random walk vanished")
        walk /= total
        y = walk.reshape(n1, n2)
        y = np.exp(beta * (y / y.max() - 1.0))
        if transposed:
            y = _sinkhorn_square(y.T, sk_iter, 0.0)[0].T
        else:
            y = _sinkhorn_square(y, sk_iter, 0.0)[0]
        y = y.ravel() / y.sum()
        new = (1.0 - alpha) * walk + alpha * y
        new /= new.sum()
        delta = float(np.max(np.abs(new - x)))
        x = new
        if delta < tol:
            converged = True
            break
    return RrwmResult(x.reshape(n1, n2), it, converged)


def _check_score(score: ArrayLike) -> NDArray[np.float64]:
    s = np.asarray(score, dtype=float)
    if s.ndim != 2 or s.size == 0:
        raise EmptyInput("score matrix is empty")
    if not np.all(np.isfinite(s)):
        raise InvalidInput("score matrix must be finite")
    return s


def _ids(ids: Sequence[Hashable] | None, n: int) -> Sequence[Hashable]:
    return range(n) if ids is None else ids


def hungarian(score: ArrayLike, row_ids: Sequence[Hashable] | None = None,
              col_ids: Sequence[Hashable] | None = None) -> MatchSet:
    """Maximum-total one-to-one assignment; ``min(n1, n2)`` pairs."""
    s = _check_score(score)
    rows, cols = linear_sum_assignment(s, maximize=True)
    r_ids, c_ids = _ids(row_ids, s.shape[0]), _ids(col_ids, s.shape[1])
    return MatchSet(tuple(r_ids[i] for i in rows), tuple(c_ids[j] for j in cols), s[rows, cols])


def sinkhorn_greedy(score: ArrayLike, row_ids: Sequence[Hashable] | None = None,
                    col_ids: Sequence[Hashable] | None = None) -> MatchSet:
    """Sinkhorn-normalize, then greedily take the largest remaining entries."""
    s = _check_score(score)
    ds = sinkhorn(np.clip(s, 0.0, None))
    order = np.argsort(-ds, axis=None, kind="stable")
    used_r = np.zeros(s.shape[0], bool)
    used_c = np.zeros(s.shape[1], bool)
    rows, cols = [], []
    for flat in order:
        i, j = divmod(int(flat), s.shape[1])
        if used_r[i] or used_c[j]:
            continue
        used_r[i] = used_c[j] = True
        rows.append(i)
        cols.append(j)
        if len(rows) == min(s.shape):
            break
    r_ids, c_ids = _ids(row_ids, s.shape[0]), _ids(col_ids, s.shape[1])
    return MatchSet(tuple(r_ids[i] for i in rows), tuple(c_ids[j] for j in cols), s[rows, cols])


def _positions(lookup: Any, ids: Sequence[Hashable]) -> NDArray[np.float64]:
    if hasattr(lookup, "index") and hasattr(lookup, "xy"):
        index, xy = lookup.index, lookup.xy
        try:
            return xy[[index[i] for i in ids]].reshape(-1, 2)
        except KeyError as exc:
            raise UnknownId(f"no position for id {exc.args[0]!r}") from None
    try:
        return np.array([lookup[i] for i in ids], dtype=float).reshape(-1, 2)
    except KeyError as exc:
        raise UnknownId(f"no position for id {exc.args[0]!r}") from None


def _lpm_pass(p: NDArray[np.float64], q: NDArray[np.float64], ref: NDArray[np.int64],
              k: int, lam: float) -> NDArray[np.bool_]:
    n = len(p)
    kk = min(k, len(ref) - 1) if len(ref) > 0 else 0
    if kk <= 0:
        return np.ones(n, bool)
    m = min(kk + 1, len(ref))
    _, ni = cKDTree(p[ref]).query(p, k=m)
    _, na = cKDTree(q[ref]).query(q, k=m)
    ni, na = ref[ni.reshape(n, m)], ref[na.reshape(n, m)]

    def drop_self(nbrs: NDArray[np.int64]) -> NDArray[np.int64]:
        out = np.empty((n, kk), dtype=np.int64)
        for row in range(n):
            others = nbrs[row][nbrs[row] != row]
            out[row] = others[:kk]
        return out

    ni, na = drop_self(ni), drop_self(na)
    shared = (ni[:, :, None] == na[:, None, :]).any(axis=2).sum(axis=1)
    cost = kk - shared
    return cost <= lam * kk


def lpm_filter(matches: MatchSet, src_positions: Any, tgt_positions: Any, k: int = 8,
               lam: float = 0.5) -> MatchSet:
    """Keep matches whose spatial neighbourhoods agree across the two sets.

    For a match ``(i, a)`` the cost is ``k`` minus the number of matches
    ``(j, b)`` with ``j`` among the ``k`` nearest matched source cells of
    ``i`` and ``b`` among the ``k`` nearest matched target cells of ``a``;
    the match survives when ``cost <= lam * k``. A second pass re-scores
    every putative match against neighbourhoods drawn from the first-pass
    survivors only.

    Positions are looked up by id in a :class:`~cellalign.io.CellTable` or a
    mapping ``id -> (x, y)``. Sets with fewer than ``k + 1`` matches are
    returned unchanged and flagged ``low_confidence``.
    """
    if k < 1:
        raise InvalidInput(f"k must be at least 1, got {k}")
    p = _positions(src_positions, matches.src_ids)
    q = _positions(tgt_positions, matches.tgt_ids)
    n = len(matches)
    if n < k + 1:
        return replace(matches, low_confidence=True)
    everything = np.arange(n)
    first = _lpm_pass(p, q, everything, k, lam)
    second = _lpm_pass(p, q, everything[first], k, lam)
    return matches.select(second)

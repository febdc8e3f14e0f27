"""Rigid Coherent Point Drift.

The source points are the centroids of an isotropic Gaussian mixture with a
uniform outlier component of weight ``w``; EM alternates posterior
responsibilities (E-step) with a closed-form weighted Procrustes update of
rotation, translation, optional scale and the shared variance (M-step).

Points may carry integer-like weights that act as replication factors, which
is how super-cells enter the fit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .errors import ConfigError, InvalidInput, TooFewPoints
from .geometry import RigidTransform

logger = logging.getLogger(__name__)

__all__ = ["CpdConfig", "CpdResult", "cpd_rigid"]

_SIGMA2_FLOOR = 1e-12
# Upper bound on elements of one dense E-step block (rows x source points);
# blocks that stay cache-resident run about twice as fast as large ones.
_BLOCK_ELEMENTS = 1 << 16
# Problems smaller than this many pairs always use the dense E-step.
_SPARSE_MIN_PAIRS = 1 << 22
# Pairs farther apart than sqrt(2 * _TRUNCATE) * sigma get Gaussian weight below
# exp(-_TRUNCATE) ~ 4e-18 relative to a coincident pair and are skipped.
_TRUNCATE = 40.0
# Use the truncated E-step when it is expected to touch less than this share of pairs.
_SPARSE_SHARE = 0.2


@dataclass(frozen=True)
class CpdConfig:
    w: float = 0.1
    max_iterations: int = 100
    tolerance: float = 1e-5
    fix_scale: bool = True
    max_points: int | None = 5000
    # Floor on the mixture variance. Zero lets EM shrink it freely; the
    # super-cell path sets it to the binning's quantization scale.
    min_sigma2: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.w < 1.0:
            raise ConfigError(f"outlier weight w must be in [0, 1), got {self.w}")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be positive")
        if self.max_points is not None and self.max_points < 2:
            raise ConfigError("max_points must be at least 2")
        if not (self.min_sigma2 >= 0 and math.isfinite(self.min_sigma2)):
            raise ConfigError("min_sigma2 must be a nonnegative finite number")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CpdResult:
    transform: RigidTransform
    sigma2: float
    iterations: int
    converged: bool
    final_loglik: float
    sigma2_history: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {"transform": self.transform.to_dict(), "sigma2": self.sigma2,
                "iterations": self.iterations, "converged": self.converged,
                "final_loglik": self.final_loglik}


def _points(p: ArrayLike, name: str) -> NDArray[np.float64]:
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInput(f"{name} must have shape (N, 2), got {arr.shape}")
    if len(arr) < 2:
        raise TooFewPoints(f"{name} needs at least 2 points, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite coordinates")
    return arr


def _weights(w: ArrayLike | None, n: int, name: str) -> NDArray[np.float64]:
    if w is None:
        return np.ones(n)
    arr = np.asarray(w, dtype=float).reshape(-1)
    if arr.shape != (n,) or not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise InvalidInput(f"{name} must be {n} positive finite values")
    return arr


def _estep(x: NDArray[np.float64], bx: NDArray[np.float64], ty: NDArray[np.float64],
           ay: NDArray[np.float64], sigma2: float, log_c: float):
    """Accumulate the sufficient statistics of one E-step, block by block."""
    n, m = len(x), len(ty)
    p1 = np.zeros(m)
    pt1 = np.zeros(n)
    px = np.zeros((m, 2))
    log_den_total = 0.0
    log_a = np.log(ay)
    y2 = np.sum(ty**2, axis=1)
    block = max(1, _BLOCK_ELEMENTS // m)
    inv = 1.0 / (2.0 * sigma2)
    for start in range(0, n, block):
        xs = x[start:start + block]
        d2 = np.sum(xs**2, axis=1)[:, None] + y2[None, :] - 2.0 * (xs @ ty.T)
        np.maximum(d2, 0.0, out=d2)
        logits = log_a[None, :] - d2 * inv
        top = np.maximum(logits.max(axis=1), log_c)
        np.exp(logits - top[:, None], out=logits)
        den = logits.sum(axis=1) + np.exp(log_c - top)
        log_den_total += float(bx[start:start + block] @ (np.log(den) + top))
        logits *= (bx[start:start + block] / den)[:, None]
        pt1[start:start + block] = logits.sum(axis=1)
        p1 += logits.sum(axis=0)
        px += logits.T @ xs
    return p1, pt1, px, log_den_total


def _estep_sparse(x: NDArray[np.float64], bx: NDArray[np.float64], ty: NDArray[np.float64],
                  ay: NDArray[np.float64], sigma2: float, log_c: float, radius: float):
    """E-step restricted to pairs within ``radius``, via a k-d tree.

    Every kept pair has logit at least ``log(min ay) - _TRUNCATE``, so a
    common shift by ``max(log_c, log(max ay))`` keeps the sums in range
    without a per-row maximum.
    """
    n, m = len(x), len(ty)
    pairs = cKDTree(x).sparse_distance_matrix(cKDTree(ty), radius, output_type="ndarray")
    i = pairs["i"].astype(np.int64)
    j = pairs["j"].astype(np.int64)
    log_a = np.log(ay)
    top = max(log_c, float(log_a.max()))
    e = np.exp(log_a[j] - pairs["v"] ** 2 / (2.0 * sigma2) - top)
    den = np.bincount(i, weights=e, minlength=n) + math.exp(log_c - top)
    log_den_total = float(bx @ (np.log(den) + top))
    p = e * (bx / den)[i]
    pt1 = np.bincount(i, weights=p, minlength=n)
    p1 = np.bincount(j, weights=p, minlength=m)
    px = np.column_stack([np.bincount(j, weights=p * x[i, 0], minlength=m),
                          np.bincount(j, weights=p * x[i, 1], minlength=m)])
    return p1, pt1, px, log_den_total


def cpd_rigid(source: ArrayLike, target: ArrayLike, config: CpdConfig | None = None, *,
              seed: int = 0, source_weights: ArrayLike | None = None,
              target_weights: ArrayLike | None = None) -> CpdResult:
    """Register ``source`` onto ``target`` with rigid CPD.

    The returned transform maps source coordinates into the target frame.
    When either side exceeds ``config.max_points`` it is uniformly
    subsampled (seeded) for the EM iterations only.
    """
    config = config or CpdConfig()
    y_all = _points(source, "source")
    x_all = _points(target, "target")
    ay_all = _weights(source_weights, len(y_all), "source_weights")
    bx_all = _weights(target_weights, len(x_all), "target_weights")

    rng = np.random.default_rng(seed)
    y, ay = y_all, ay_all
    x, bx = x_all, bx_all
    if config.max_points is not None:
        if len(y) > config.max_points:
            keep = np.sort(rng.choice(len(y), config.max_points, replace=False))
            y, ay = y[keep], ay[keep]
        if len(x) > config.max_points:
            keep = np.sort(rng.choice(len(x), config.max_points, replace=False))
            x, bx = x[keep], bx[keep]

    # Work in a frame centred on the target to keep squared distances well conditioned.
    origin = (bx @ x) / bx.sum()
    x = x - origin
    y = y - origin
    m_eff, n_eff = float(ay.sum()), float(bx.sum())
    dim = 2

    mu_x = (bx @ x) / n_eff
    mu_y = (ay @ y) / m_eff
    sigma2 = float((bx @ np.sum((x - mu_x) ** 2, axis=1)) / n_eff
                   + (ay @ np.sum((y - mu_y) ** 2, axis=1)) / m_eff
                   + np.sum((mu_x - mu_y) ** 2)) / dim
    if not sigma2 > 0:
        raise InvalidInput("both point sets collapse to the same single location")

    lo, hi = x.min(axis=0), x.max(axis=0)
    area = float(np.prod(np.maximum(hi - lo, 1e-9)))

    rot = np.eye(2)
    scale = 1.0
    t = np.zeros(2)
    sigma2 = max(sigma2, config.min_sigma2)
    raw_prev = sigma2
    history = [sigma2]
    converged = False
    loglik = -math.inf
    it = 0
    for it in range(1, config.max_iterations + 1):
        ty = scale * y @ rot.T + t
        if config.w > 0:
            log_c = (math.log(2.0 * math.pi * sigma2) + math.log(config.w / (1.0 - config.w))
                     + math.log(m_eff / n_eff))
        else:
            log_c = -math.inf
        radius = math.sqrt(2.0 * _TRUNCATE * sigma2)
        # Needs a finite outlier term: a row with no pair in range then has
        # zero responsibilities, as its exact values would be below 1e-17.
        if config.w > 0 and len(x) * len(ty) > _SPARSE_MIN_PAIRS and \
                math.pi * radius**2 < _SPARSE_SHARE * area:
            p1, pt1, px, log_den = _estep_sparse(x, bx, ty, ay, sigma2, log_c, radius)
        else:
            p1, pt1, px, log_den = _estep(x, bx, ty, ay, sigma2, log_c)
        np_tot = float(p1.sum())
        loglik = log_den + n_eff * math.log((1.0 - config.w) / (m_eff * 2.0 * math.pi * sigma2))
        if not np_tot > 0:
            logger.warning("CPD: all mass assigned to the outlier component at iteration %d", it)
            break

        mu_x = (pt1 @ x) / np_tot
        mu_y = (p1 @ y) / np_tot
        a = px.T @ y - np_tot * np.outer(mu_x, mu_y)
        u, _, vt = np.linalg.svd(a)
        c = np.diag([1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
        rot = u @ c @ vt
        tr_ar = float(np.trace(a.T @ rot))
        yy = float(p1 @ np.sum((y - mu_y) ** 2, axis=1))
        xx = float(pt1 @ np.sum((x - mu_x) ** 2, axis=1))
        if not config.fix_scale:
            scale = tr_ar / yy
        t = mu_x - scale * rot @ mu_y
        new_sigma2 = (xx - 2.0 * scale * tr_ar + scale**2 * yy) / (np_tot * dim)

        if new_sigma2 < _SIGMA2_FLOOR and config.min_sigma2 < _SIGMA2_FLOOR:
            sigma2 = _SIGMA2_FLOOR
            history.append(sigma2)
            converged = True
            break
        # Convergence is judged on the unclamped estimate: while the floor is
        # active it keeps falling as long as the transform still improves.
        change = abs(raw_prev - new_sigma2) / raw_prev if raw_prev > 0 else 0.0
        raw_prev = float(new_sigma2)
        sigma2 = max(float(new_sigma2), config.min_sigma2)
        history.append(sigma2)
        if change < config.tolerance:
            converged = True
            break

    # Undo the centring: p_target = s R (p_src - o) + t + o.
    t_world = t + origin - scale * rot @ origin
    theta = math.atan2(rot[1, 0], rot[0, 0])
    transform = RigidTransform(theta, scale, t_world[0], t_world[1])
    return CpdResult(transform, sigma2, it, converged, float(loglik), tuple(history))

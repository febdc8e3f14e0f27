"""Least-squares rigid and affine fits from point correspondences."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike

from .errors import DegenerateConfiguration, InvalidInput, TooFewPairs
from .geometry import AffineTransform, RigidTransform, Transform

__all__ = ["fit_rigid", "fit_affine", "AffineFit", "residual_rms"]


def _prepare(src: ArrayLike, tgt: ArrayLike, weights: ArrayLike | None, minimum: int):
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    tgt = np.asarray(tgt, dtype=float).reshape(-1, 2)
    if src.shape != tgt.shape:
        raise InvalidInput(f"{len(src)} source points but {len(tgt)} target points")
    if len(src) < minimum:
        raise TooFewPairs(f"need at least {minimum} pairs, got {len(src)}")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(tgt))):
        raise InvalidInput("correspondences must be finite")
    if weights is None:
        w = np.ones(len(src))
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape != (len(src),) or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidInput("weights must be finite, nonnegative, one per pair")
        if not w.sum() > 0:
            raise InvalidInput("weights are all zero")
    return src, tgt, w / w.sum()


def fit_rigid(src: ArrayLike, tgt: ArrayLike, weights: ArrayLike | None = None,
              estimate_scale: bool = False) -> RigidTransform:
    """Weighted least-squares similarity fit (Umeyama), proper rotations only.

    Minimizes ``sum w_i |T(src_i) - tgt_i|^2``; the scale is held at 1 unless
    ``estimate_scale`` is set.
    """
    src, tgt, w = _prepare(src, tgt, weights, 2)
    mu_s = w @ src
    mu_t = w @ tgt
    s0 = src - mu_s
    t0 = tgt - mu_t
    var_s = float(w @ np.sum(s0**2, axis=1))
    if np.ptp(src, axis=0).max() == 0.0 or not var_s > 0.0:
        raise DegenerateConfiguration("source points are coincident")
    cov = (t0 * w[:, None]).T @ s0
    u, sing, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    c = np.diag([1.0, d])
    rot = u @ c @ vt
    scale = float(np.sum(sing * np.diag(c)) / var_s) if estimate_scale else 1.0
    if not scale > 0:
        raise DegenerateConfiguration("fitted scale is not positive")
    t = mu_t - scale * rot @ mu_s
    theta = math.atan2(rot[1, 0], rot[0, 0])
    return RigidTransform(theta, scale, t[0], t[1])


class AffineFit(NamedTuple):
    transform: AffineTransform
    rms: float


def fit_affine(src: ArrayLike, tgt: ArrayLike, weights: ArrayLike | None = None) -> AffineFit:
    """Weighted least squares on the six affine coefficients.

    Returns the transform together with the (unweighted) residual RMS in
    micrometres.
    """
    src, tgt, w = _prepare(src, tgt, weights, 3)
    # Centre for conditioning; collinear or coincident sources are rank deficient.
    mu_s = w @ src
    s0 = src - mu_s
    sw = np.sqrt(w)
    design = np.column_stack([s0, np.ones(len(src))]) * sw[:, None]
    sing = np.linalg.svd(design, compute_uv=False)
    if sing[-1] <= 1e-10 * max(sing[0], 1e-300):
        raise DegenerateConfiguration("source points are collinear")
    coef, *_ = np.linalg.lstsq(design, tgt * sw[:, None], rcond=None)
    lin = coef[:2].T
    t = coef[2] - lin @ mu_s
    affine = AffineTransform(lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1], t[0], t[1])
    return AffineFit(affine, residual_rms(affine, src, tgt))


def residual_rms(transform: Transform, src: ArrayLike, tgt: ArrayLike) -> float:
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    tgt = np.asarray(tgt, dtype=float).reshape(-1, 2)
    if len(src) == 0:
        return 0.0
    r = transform.apply(src) - tgt
    return float(np.sqrt(np.mean(np.sum(r**2, axis=1))))

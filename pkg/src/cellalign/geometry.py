"""Planar rigid/affine transforms in micrometre coordinates.

Points are handled as numpy arrays: a single point has shape ``(2,)`` and a
point set has shape ``(N, 2)``. Every transform accepts either.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InvalidInput, InvalidPixelSize, SingularTransform

__all__ = [
    "RigidTransform",
    "AffineTransform",
    "apply_rigid",
    "translation_magnitude",
    "compose",
    "invert",
    "px_to_um",
    "normalize_angle",
    "transform_from_dict",
]

_DET_EPS = 1e-12


def normalize_angle(theta: float) -> float:
    """Wrap an angle in radians to (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def _as_points(p: ArrayLike) -> NDArray[np.float64]:
    arr = np.asarray(p, dtype=float)
    if arr.shape[-1] != 2 or arr.ndim > 2:
        raise InvalidInput(f"expected point(s) of shape (2,) or (N, 2), got {arr.shape}")
    return arr


def _check_finite(**values: float) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise InvalidInput(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class RigidTransform:
    """Similarity transform ``p -> scale * R(theta) @ p + (dx, dy)``.

    ``theta`` is stored normalized to (-pi, pi]. The pipeline keeps
    ``scale == 1`` because coordinates are converted to micrometres at ingest.
    """

    theta: float = 0.0
    scale: float = 1.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self) -> None:
        _check_finite(theta=self.theta, scale=self.scale, dx=self.dx, dy=self.dy)
        if self.scale <= 0:
            raise InvalidInput(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dy", float(self.dy))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_degrees(cls, theta_deg: float, dx: float = 0.0, dy: float = 0.0,
                     scale: float = 1.0) -> RigidTransform:
        return cls(math.radians(theta_deg), scale, dx, dy)

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta)

    @property
    def translation(self) -> NDArray[np.float64]:
        return np.array([self.dx, self.dy])

    def linear(self) -> NDArray[np.float64]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.scale * np.array([[c, -s], [s, c]])

    def matrix(self) -> NDArray[np.float64]:
        """3x3 homogeneous matrix."""
        m = np.eye(3)
        m[:2, :2] = self.linear()
        m[:2, 2] = (self.dx, self.dy)
        return m

    def apply(self, p: ArrayLike) -> NDArray[np.float64]:
        pts = _as_points(p)
        c, s = math.cos(self.theta), math.sin(self.theta)
        sc, ss = self.scale * c, self.scale * s
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([sc * x - ss * y + self.dx, ss * x + sc * y + self.dy], axis=-1)

    __call__ = apply

    def translation_magnitude(self) -> float:
        return math.hypot(self.dx, self.dy)

    def to_affine(self) -> AffineTransform:
        (a11, a12), (a21, a22) = self.linear()
        return AffineTransform(a11, a12, a21, a22, self.dx, self.dy)

    def to_dict(self) -> dict[str, float]:
        return {"theta_rad": self.theta, "scale": self.scale,
                "dx_um": self.dx, "dy_um": self.dy}

    @classmethod
    def from_dict(cls, d: dict) -> RigidTransform:
        return cls(float(d["theta_rad"]), float(d.get("scale", 1.0)),
                   float(d["dx_um"]), float(d["dy_um"]))


@dataclass(frozen=True)
class AffineTransform:
    """General planar affine map ``p -> A @ p + t``.

    Construction only checks finiteness; operations that need an inverse
    raise :class:`SingularTransform` on a degenerate linear part.
    """

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self) -> None:
        _check_finite(a11=self.a11, a12=self.a12, a21=self.a21, a22=self.a22,
                      tx=self.tx, ty=self.ty)
        for name in ("a11", "a12", "a21", "a22", "tx", "ty"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls()

    @classmethod
    def from_matrix(cls, m: ArrayLike) -> AffineTransform:
        m = np.asarray(m, dtype=float)
        return cls(m[0, 0], m[0, 1], m[1, 0], m[1, 1], m[0, 2], m[1, 2])

    @property
    def determinant(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    @property
    def is_invertible(self) -> bool:
        return abs(self.determinant) > _DET_EPS

    @property
    def translation(self) -> NDArray[np.float64]:
        return np.array([self.tx, self.ty])

    @property
    def rotation_angle(self) -> float:
        """Angle of the rotation closest to the linear part (polar decomposition)."""
        return math.atan2(self.a21 - self.a12, self.a11 + self.a22)

    def linear(self) -> NDArray[np.float64]:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    def matrix(self) -> NDArray[np.float64]:
        return np.array([[self.a11, self.a12, self.tx],
                         [self.a21, self.a22, self.ty],
                         [0.0, 0.0, 1.0]])

    def apply(self, p: ArrayLike) -> NDArray[np.float64]:
        pts = _as_points(p)
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([self.a11 * x + self.a12 * y + self.tx,
                         self.a21 * x + self.a22 * y + self.ty], axis=-1)

    __call__ = apply

    def translation_magnitude(self) -> float:
        return math.hypot(self.tx, self.ty)

    def to_affine(self) -> AffineTransform:
        return self

    def to_dict(self) -> dict[str, float]:
        return {"a11": self.a11, "a12": self.a12, "a21": self.a21, "a22": self.a22,
                "tx_um": self.tx, "ty_um": self.ty}

    @classmethod
    def from_dict(cls, d: dict) -> AffineTransform:
        return cls(float(d["a11"]), float(d["a12"]), float(d["a21"]), float(d["a22"]),
                   float(d["tx_um"]), float(d["ty_um"]))


Transform = RigidTransform | AffineTransform


def transform_from_dict(d: dict) -> Transform:
    """Decode either transform JSON object, dispatching on its field names."""
    if "theta_rad" in d:
        return RigidTransform.from_dict(d)
    if "a11" in d:
        return AffineTransform.from_dict(d)
    raise InvalidInput(f"not a transform object: keys {sorted(d)}")


def apply_rigid(t: RigidTransform, p: ArrayLike) -> NDArray[np.float64]:
    return t.apply(p)


def translation_magnitude(t: Transform) -> float:
    return t.translation_magnitude()


def compose(outer: Transform, inner: Transform) -> AffineTransform:
    """Affine map equivalent to ``outer(inner(p))``."""
    m = outer.to_affine().matrix() @ inner.to_affine().matrix()
    return AffineTransform.from_matrix(m)


def invert(t: Transform) -> AffineTransform:
    a = t.to_affine()
    det = a.determinant
    if not abs(det) > _DET_EPS:
        raise SingularTransform(f"linear part is singular (det={det!r})")
    inv = np.array([[a.a22, -a.a12], [-a.a21, a.a11]]) / det
    t_inv = -inv @ a.translation
    return AffineTransform(inv[0, 0], inv[0, 1], inv[1, 0], inv[1, 1], t_inv[0], t_inv[1])


def px_to_um(p: ArrayLike, pixel_size: float) -> NDArray[np.float64]:
    """Scale pixel coordinates to micrometres."""
    if not (pixel_size > 0 and math.isfinite(pixel_size)):
        raise InvalidPixelSize(f"pixel size must be a positive finite number, got {pixel_size!r}")
    return _as_points(p) * pixel_size

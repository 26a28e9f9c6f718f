"""Gaussian primitives, clouds of them, and rays.

A cloud is stored as parallel arrays (structure of arrays) so the numerical
kernels can consume it without copying; :class:`Gaussian` is the per-primitive
view used by the scalar API and in tests.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Tuple

import numpy as np

from .errors import DegenerateRay

SCALE_MIN = 1e-3  # mm

_MAGIC = b"GRTC"
_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_RECORD_DTYPE = np.dtype(
    [("mu", "<f8", 3), ("log_scale", "<f8", 3), ("rotation", "<f8", 4), ("rho", "<f8")]
)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (or stack of them) from (w, x, y, z) quaternions.

    The quaternion is normalized first, so any non-zero 4-vector is accepted.
    """
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def axis_angle_quaternion(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


@dataclass
class Gaussian:
    """One anisotropic primitive: position, log-scale, rotation and density."""

    mu: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    rho: float = 1.0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=float).reshape(3)
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        self.rotation = q / np.linalg.norm(q)
        self.rho = float(self.rho)

    @classmethod
    def from_scale(cls, mu, scale, rotation=(1.0, 0.0, 0.0, 0.0), rho=1.0) -> "Gaussian":
        return cls(mu, np.log(np.asarray(scale, dtype=float)), rotation, rho)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quaternion_to_matrix(self.rotation)


def covariance(g: Gaussian) -> np.ndarray:
    """Sigma = R diag(s^2) R^T."""
    R = g.rotation_matrix
    return (R * np.exp(2 * g.log_scale)) @ R.T


def inverse_covariance(g: Gaussian) -> np.ndarray:
    """Closed-form inverse R diag(s^-2) R^T; no general matrix inversion."""
    R = g.rotation_matrix
    return (R * np.exp(-2 * g.log_scale)) @ R.T


class GaussianCloud:
    """An ordered collection of Gaussians held as parallel arrays.

    Attributes:
        mu: (M, 3) positions in mm.
        log_scale: (M, 3) per-axis log standard deviations.
        rotation: (M, 4) unit quaternions (w, x, y, z).
        rho: (M,) non-negative central densities.
    """

    def __init__(self, mu=None, log_scale=None, rotation=None, rho=None):
        self.mu = np.zeros((0, 3)) if mu is None else np.array(mu, dtype=float).reshape(-1, 3)
        m = len(self.mu)
        self.log_scale = (
            np.zeros((m, 3)) if log_scale is None else np.array(log_scale, dtype=float).reshape(-1, 3)
        )
        if rotation is None:
            rotation = np.tile([1.0, 0.0, 0.0, 0.0], (m, 1))
        self.rotation = np.array(rotation, dtype=float).reshape(-1, 4)
        self.rho = np.ones(m) if rho is None else np.array(rho, dtype=float).reshape(-1)
        if not (len(self.log_scale) == len(self.rotation) == len(self.rho) == m):
            raise ValueError("parameter arrays disagree on the number of Gaussians")
        if m:
            self.rotation /= np.linalg.norm(self.rotation, axis=1, keepdims=True)

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian]) -> "GaussianCloud":
        gs = list(gaussians)
        if not gs:
            return cls()
        return cls(
            np.stack([g.mu for g in gs]),
            np.stack([g.log_scale for g in gs]),
            np.stack([g.rotation for g in gs]),
            np.array([g.rho for g in gs]),
        )

    def __len__(self) -> int:
        return len(self.rho)

    @property
    def count(self) -> int:
        return len(self)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.mu[i], self.log_scale[i], self.rotation[i], self.rho[i])

    def __iter__(self) -> Iterator[Gaussian]:
        return (self[i] for i in range(len(self)))

    def __repr__(self) -> str:
        return f"GaussianCloud(M={len(self)})"

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.mu.copy(), self.log_scale.copy(), self.rotation.copy(), self.rho.copy())

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(self.mu[index], self.log_scale[index], self.rotation[index], self.rho[index])

    def concatenate(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            np.concatenate([self.mu, other.mu]),
            np.concatenate([self.log_scale, other.log_scale]),
            np.concatenate([self.rotation, other.rotation]),
            np.concatenate([self.rho, other.rho]),
        )

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def rotation_matrices(self) -> np.ndarray:
        return quaternion_to_matrix(self.rotation) if len(self) else np.zeros((0, 3, 3))

    def covariances(self) -> np.ndarray:
        R = self.rotation_matrices()
        return np.einsum("mij,mj,mkj->mik", R, np.exp(2 * self.log_scale), R)

    def inverse_covariances(self) -> np.ndarray:
        R = self.rotation_matrices()
        return np.einsum("mij,mj,mkj->mik", R, np.exp(-2 * self.log_scale), R)

    def project_constraints(self, scale_min: float = SCALE_MIN, scale_max: float = np.inf) -> None:
        """Re-normalize quaternions and clamp rho and scale in place."""
        if not len(self):
            return
        self.rotation /= np.linalg.norm(self.rotation, axis=1, keepdims=True)
        np.maximum(self.rho, 0.0, out=self.rho)
        np.clip(self.log_scale, np.log(scale_min), np.log(scale_max), out=self.log_scale)

    def to_bytes(self) -> bytes:
        rec = np.empty(len(self), dtype=_RECORD_DTYPE)
        rec["mu"] = self.mu
        rec["log_scale"] = self.log_scale
        rec["rotation"] = self.rotation
        rec["rho"] = self.rho
        return _HEADER.pack(_MAGIC, _VERSION, len(self)) + rec.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GaussianCloud":
        if len(buf) < _HEADER.size:
            raise ValueError("truncated cloud file")
        magic, version, count = _HEADER.unpack_from(buf)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != _VERSION:
            raise ValueError(f"unsupported cloud version {version}")
        body = buf[_HEADER.size:]
        if len(body) != count * _RECORD_DTYPE.itemsize:
            raise ValueError("cloud record count does not match file size")
        rec = np.frombuffer(body, dtype=_RECORD_DTYPE, count=count)
        cloud = cls.__new__(cls)
        # bypass __init__ so stored quaternions round-trip bit-exactly
        cloud.mu = rec["mu"].astype(float)
        cloud.log_scale = rec["log_scale"].astype(float)
        cloud.rotation = rec["rotation"].astype(float)
        cloud.rho = rec["rho"].astype(float)
        return cloud

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_cloud(cloud: GaussianCloud, path) -> None:
    Path(path).write_bytes(cloud.to_bytes())


def load_cloud(path) -> GaussianCloud:
    return GaussianCloud.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class Ray:
    """A line o + t d with unit direction and an optional finite extent."""

    origin: np.ndarray
    direction: np.ndarray
    t_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise DegenerateRay("ray direction has zero length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)
        if self.t_range is not None:
            t0, t1 = map(float, self.t_range)
            if not t0 < t1:
                raise DegenerateRay(f"empty t_range ({t0}, {t1})")
            object.__setattr__(self, "t_range", (t0, t1))

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def make_ray(origin, toward) -> Ray:
    """Ray from ``origin`` through ``toward``, spanning t in [0, |toward - origin|]."""
    o = np.asarray(origin, dtype=float)
    v = np.asarray(toward, dtype=float) - o
    length = float(np.linalg.norm(v))
    if length <= 1e-9:
        raise DegenerateRay("ray endpoints coincide")
    return Ray(o, v / length, (0.0, length))


@dataclass
class Rays:
    """A batch of rays with a common array shape.

    ``t_min``/``t_max`` are -inf/+inf for unbounded rays.
    """

    origins: np.ndarray
    directions: np.ndarray
    t_min: np.ndarray
    t_max: np.ndarray

    @classmethod
    def unbounded(cls, origins, directions) -> "Rays":
        o = np.asarray(origins, dtype=float)
        d = np.asarray(directions, dtype=float)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        shape = o.shape[:-1]
        return cls(o, d, np.full(shape, -np.inf), np.full(shape, np.inf))

    @classmethod
    def between(cls, starts, ends) -> "Rays":
        """Vectorized :func:`make_ray`."""
        a = np.asarray(starts, dtype=float)
        v = np.asarray(ends, dtype=float) - a
        length = np.linalg.norm(v, axis=-1)
        if np.any(length <= 1e-9):
            raise DegenerateRay("ray endpoints coincide")
        return cls(a, v / length[..., None], np.zeros(length.shape), length)

    @classmethod
    def from_rays(cls, rays: Iterable[Ray]) -> "Rays":
        rays = list(rays)
        t = np.array([r.t_range if r.t_range else (-np.inf, np.inf) for r in rays]).reshape(-1, 2)
        return cls(
            np.array([r.origin for r in rays]).reshape(-1, 3),
            np.array([r.direction for r in rays]).reshape(-1, 3),
            t[:, 0].copy(),
            t[:, 1].copy(),
        )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.t_min.shape

    def __len__(self) -> int:
        return int(np.prod(self.shape))

    def reshape(self, *shape) -> "Rays":
        return Rays(
            self.origins.reshape(*shape, 3),
            self.directions.reshape(*shape, 3),
            self.t_min.reshape(*shape),
            self.t_max.reshape(*shape),
        )

    def flat(self) -> "Rays":
        return self.reshape(-1)

    def __getitem__(self, idx) -> Ray:
        t0, t1 = float(self.t_min[idx]), float(self.t_max[idx])
        t_range = None if not (np.isfinite(t0) and np.isfinite(t1)) else (t0, t1)
        return Ray(self.origins[idx], self.directions[idx], t_range)

    def take(self, index) -> "Rays":
        return Rays(self.origins[index], self.directions[index], self.t_min[index], self.t_max[index])

    @staticmethod
    def concatenate(parts) -> "Rays":
        parts = [p.flat() for p in parts]
        return Rays(
            np.concatenate([p.origins for p in parts]),
            np.concatenate([p.directions for p in parts]),
            np.concatenate([p.t_min for p in parts]),
            np.concatenate([p.t_max for p in parts]),
        )

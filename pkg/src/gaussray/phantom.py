"""Analytic phantoms with exact line integrals, simulation and Poisson noise.

Phantom elements are spheres and z-aligned finite cylinders carrying a signed
activity. The composite activity at a point is the plain sum of the elements
covering it, so a hollow insert is an overlay whose activity cancels the
background it sits in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import NegativeData
from .geometry import (CylindricalPet, ScannerGeometry, all_rays, geometry_from_config,
                       geometry_to_config, view_index)
from .model import Ray, Rays
from .volume import VolumeGrid

NEMA_SPHERE_DIAMETERS = (10.0, 13.0, 17.0, 22.0, 28.0, 37.0)  # mm, spheres 0..5
NEMA_RING_DIAMETER = 114.4  # mm, circle through the sphere centres
NEMA_INSERT_RADIUS = 25.0  # mm, hollow central cylinder
POINT_SOURCE_POSITIONS = ((0.0, 10.0, 0.0), (0.0, 100.0, 0.0), (0.0, 200.0, 0.0))  # mm


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    activity: float
    additive: bool = True

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * math.pi * self.radius ** 3

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.sum((pts - self.center) ** 2, axis=-1) < self.radius ** 2

    def chord(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        delta = o - self.center
        tc = -np.sum(delta * d, axis=-1)
        b2 = np.sum(delta * delta, axis=-1) - tc * tc
        return 2.0 * np.sqrt(np.maximum(self.radius ** 2 - b2, 0.0))


@dataclass
class Cylinder:
    """Finite cylinder with its axis along z."""

    center: np.ndarray
    radius: float
    half_length: float
    activity: float
    additive: bool = True

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)

    @property
    def volume(self) -> float:
        return math.pi * self.radius ** 2 * 2.0 * self.half_length

    def contains(self, pts: np.ndarray) -> np.ndarray:
        rel = pts - self.center
        return (rel[..., 0] ** 2 + rel[..., 1] ** 2 < self.radius ** 2) & (np.abs(rel[..., 2]) < self.half_length)

    def chord(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        rel = o - self.center
        a = d[..., 0] ** 2 + d[..., 1] ** 2
        b = rel[..., 0] * d[..., 0] + rel[..., 1] * d[..., 1]
        c = rel[..., 0] ** 2 + rel[..., 1] ** 2 - self.radius ** 2
        disc = b * b - a * c
        radial = a > 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.sqrt(np.maximum(disc, 0.0))
            t1 = np.where(radial, (-b - root) / np.where(radial, a, 1.0), -np.inf)
            t2 = np.where(radial, (-b + root) / np.where(radial, a, 1.0), np.inf)
        miss = np.where(radial, disc <= 0.0, c >= 0.0)
        axial = np.abs(d[..., 2]) > 1e-15
        dz = np.where(axial, d[..., 2], 1.0)
        ta = (-self.half_length - rel[..., 2]) / dz
        tb = (self.half_length - rel[..., 2]) / dz
        t3 = np.where(axial, np.minimum(ta, tb), -np.inf)
        t4 = np.where(axial, np.maximum(ta, tb), np.inf)
        miss |= ~axial & (np.abs(rel[..., 2]) >= self.half_length)
        with np.errstate(invalid="ignore"):
            length = np.minimum(t2, t4) - np.maximum(t1, t3)
        return np.where(miss | ~np.isfinite(length), 0.0, np.maximum(length, 0.0))


Element = Union[Sphere, Cylinder]


@dataclass
class AnalyticPhantom:
    elements: list = field(default_factory=list)
    name: str = "custom"

    def activity_at(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        out = np.zeros(pts.shape[:-1])
        for e in self.elements:
            out += e.activity * e.contains(pts)
        return out

    def total_activity(self) -> float:
        """Integral of the composite activity (exact for overlays nested in their hosts)."""
        return float(sum(e.activity * e.volume for e in self.elements))


def phantom_line_integral(p: AnalyticPhantom, r: Union[Ray, Rays]):
    """Sum over elements of activity x chord length along the (infinite) line."""
    if isinstance(r, Ray):
        o, d = r.origin, r.direction
    else:
        o, d = r.origins, r.directions
    total = np.zeros(np.shape(o)[:-1])
    for e in p.elements:
        total = total + e.activity * e.chord(o, d)
    if isinstance(r, Ray):
        return max(float(total), 0.0)
    return np.maximum(total, 0.0)


def build_nema(background_activity: float = 1.0, ratio: float = 4.0, background_radius: float = 110.0,
               half_length: float = 90.0) -> AnalyticPhantom:
    """Simplified NEMA image-quality phantom.

    Six spheres (inner diameters 10-37 mm) sit 60 degrees apart on a 114.4 mm
    circle in the z = 0 plane, sphere ``i`` at angle ``60 i`` degrees from +x.
    Sphere activity is ``ratio`` times the background; the central insert of
    radius 25 mm carries no activity.
    """
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    bg = float(background_activity)
    elems: list = [Cylinder((0, 0, 0), background_radius, half_length, bg)]
    elems.append(Cylinder((0, 0, 0), NEMA_INSERT_RADIUS, half_length, -bg, additive=False))
    for i, (c, diam) in enumerate(zip(nema_sphere_centers(), NEMA_SPHERE_DIAMETERS)):
        elems.append(Sphere(c, diam / 2.0, (ratio - 1.0) * bg))
    return AnalyticPhantom(elems, name="nema")


def nema_sphere_centers() -> np.ndarray:
    ang = np.deg2rad(60.0 * np.arange(6))
    r = NEMA_RING_DIAMETER / 2.0
    return np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(6)], axis=1)


def build_point_sources(voxel_spacing: float = 2.0, activity: float = 1.0) -> AnalyticPhantom:
    """Three equal small spheres at 1, 10 and 20 cm from the isocentre along +y."""
    return AnalyticPhantom([Sphere(p, voxel_spacing, activity) for p in POINT_SOURCE_POSITIONS],
                           name="point-sources")


def parse_spheres(spec: str) -> AnalyticPhantom:
    """Phantom from ``"x,y,z,radius,activity;..."`` (mm, per-mm activity)."""
    elems = []
    for item in filter(None, (s.strip() for s in spec.split(";"))):
        vals = [float(v) for v in item.split(",")]
        if len(vals) != 5:
            raise ValueError(f"sphere spec needs 5 numbers, got {item!r}")
        elems.append(Sphere(vals[:3], vals[3], vals[4]))
    return AnalyticPhantom(elems, name="spheres")


@dataclass
class ProjectionSet:
    """Measured or simulated data for every bin of ``geometry`` (storage order)."""

    geometry: ScannerGeometry
    data: np.ndarray
    counts_scale: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        self.data = np.asarray(self.data).reshape(-1)
        if len(self.data) != self.geometry.n_bins:
            raise ValueError(f"data has {len(self.data)} values, geometry has {self.geometry.n_bins} bins")

    def view(self, v: int) -> np.ndarray:
        return self.data[view_index(self.geometry, v)]

    def dims(self) -> dict:
        g = self.geometry
        if isinstance(g, CylindricalPet):
            return {"segments": g.segments, "axial_per_segment": [g.n_axial(k) for k in g.segments],
                    "n_views": g.n_views, "n_radial": g.n_radial_bins,
                    "order": "segment, view, axial, radial"}
        return {"n_views": g.n_views, "nv": g.nv, "nu": g.nu, "order": "view, row, col"}

    def sidecar(self) -> dict:
        return {"geometry": geometry_to_config(self.geometry), "dims": self.dims(),
                "n_bins": int(self.geometry.n_bins), "dtype": "<f4",
                "counts_scale": self.counts_scale, "seed": self.seed}

    def save(self, path) -> None:
        path = Path(path)
        path.write_bytes(np.ascontiguousarray(self.data, dtype="<f4").tobytes())
        Path(str(path) + ".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ProjectionSet":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        geom = geometry_from_config(meta["geometry"])
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        if raw.size != geom.n_bins:
            raise ValueError("projection file size does not match its geometry")
        return cls(geom, raw.astype(np.float32), meta.get("counts_scale"), meta.get("seed"))


def simulate(p: AnalyticPhantom, geom: ScannerGeometry) -> ProjectionSet:
    return ProjectionSet(geom, phantom_line_integral(p, all_rays(geom)))


def add_poisson(ps: ProjectionSet, total_counts: float, seed: int) -> ProjectionSet:
    """Poisson-resample the data at a total of ``total_counts`` expected counts.

    The noisy counts are divided back by the scale, so the result keeps the
    units of the input; the scale is recorded in ``counts_scale``.
    """
    if total_counts <= 0:
        raise ValueError("total_counts must be positive")
    data = np.asarray(ps.data, dtype=float)
    if np.any(data < 0):
        raise NegativeData("Poisson noise needs non-negative data")
    total = data.sum()
    rng = np.random.default_rng(seed)
    if total == 0:
        return ProjectionSet(ps.geometry, np.zeros_like(data), 1.0, seed)
    scale = total_counts / total
    noisy = rng.poisson(data * scale) / scale
    return ProjectionSet(ps.geometry, noisy, float(scale), int(seed))


def rasterize(p: AnalyticPhantom, grid: VolumeGrid, supersample: int = 1) -> VolumeGrid:
    """Composite activity at voxel centres, or averaged over ``supersample``^3 sub-points."""
    n = int(supersample)
    if n < 1:
        raise ValueError("supersample must be >= 1")
    out = np.zeros(grid.dims[::-1])
    offsets = (np.arange(n) + 0.5) / n - 0.5
    centers = grid.centers()
    for ox in offsets:
        for oy in offsets:
            for oz in offsets:
                out += p.activity_at(centers + np.array([ox, oy, oz]) * grid.spacing)
    return grid.like(out / n ** 3)

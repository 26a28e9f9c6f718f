"""Scanner geometries and the rays behind every detector bin.

Conventions shared by all geometries (distances in mm, angles in radians):

* View angle ``theta`` rotates about +z. A parallel/PET ray at ``theta``
  travels along ``(-sin theta, cos theta, 0)``; the in-plane detector axis
  is ``(cos theta, sin theta, 0)``, the axial one is +z.
* Detector-bin coordinates are centred: bin ``i`` of ``n`` sits at
  ``(i - (n - 1) / 2) * spacing``.
* CT data are stored view-major ``(view, row, col)``. PET data are stored
  segment-major in the order 0, -1, +1, -2, +2, ...; within a segment the
  order is ``(view, axial, radial)``. Segment ``k`` holds the
  ``n_rings - |k|`` ring pairs of ring difference ``k`` (span 1).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple, Union

import numpy as np

from .errors import ConfigError, InvalidCoord, InvalidView
from .model import Ray, Rays, make_ray


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class ParallelBeam:
    nu: int
    nv: int
    bin_spacing: float
    n_views: int
    angular_range: float = math.pi

    def __post_init__(self):
        _require(min(self.nu, self.nv, self.n_views) >= 1, "counts must be >= 1")
        _require(self.bin_spacing > 0 and self.angular_range > 0, "distances/angles must be > 0")

    @property
    def view_shape(self):
        return (self.nv, self.nu)

    @property
    def n_bins(self) -> int:
        return self.n_views * self.nu * self.nv

    def angle(self, view: int) -> float:
        return view * self.angular_range / self.n_views

    def fov(self):
        return 0.5 * self.nu * self.bin_spacing, 0.5 * self.nv * self.bin_spacing


@dataclass(frozen=True)
class ConeBeam:
    dso: float
    dsd: float
    nu: int
    nv: int
    bin_spacing: float
    n_views: int
    angular_range: float = 2 * math.pi

    def __post_init__(self):
        _require(min(self.nu, self.nv, self.n_views) >= 1, "counts must be >= 1")
        _require(min(self.dso, self.dsd, self.bin_spacing, self.angular_range) > 0,
                 "distances/angles must be > 0")
        _require(self.dsd > self.dso, "source-detector distance must exceed source-isocenter distance")

    @property
    def view_shape(self):
        return (self.nv, self.nu)

    @property
    def n_bins(self) -> int:
        return self.n_views * self.nu * self.nv

    def angle(self, view: int) -> float:
        return view * self.angular_range / self.n_views

    def fov(self):
        half_fan = math.atan(0.5 * self.nu * self.bin_spacing / self.dsd)
        return self.dso * math.sin(half_fan), 0.5 * self.nv * self.bin_spacing * self.dso / self.dsd


@dataclass(frozen=True)
class CylindricalPet:
    ring_radius: float = 400.0
    n_crystals_per_ring: int = 576
    n_rings: int = 1
    ring_spacing: float = 4.0
    n_radial_bins: int = 101
    n_views: int = 288
    max_ring_difference: int = 0
    arc_corrected: bool = False

    def __post_init__(self):
        _require(min(self.n_crystals_per_ring, self.n_rings, self.n_radial_bins, self.n_views) >= 1,
                 "counts must be >= 1")
        _require(self.ring_radius > 0 and self.ring_spacing > 0, "distances must be > 0")
        _require(self.n_radial_bins % 2 == 1, "n_radial_bins must be odd")
        _require(0 <= self.max_ring_difference < self.n_rings, "max_ring_difference must be < n_rings")
        half = (self.n_radial_bins - 1) // 2
        _require(abs(self.radial_offset(half)) < self.ring_radius, "radial bins extend beyond the ring")
        _require(2 * half < self.n_crystals_per_ring, "more radial bins than crystal offsets")

    @property
    def segments(self) -> list[int]:
        out = [0]
        for k in range(1, self.max_ring_difference + 1):
            out += [-k, k]
        return out

    def n_axial(self, segment: int) -> int:
        return self.n_rings - abs(segment)

    @property
    def n_planes(self) -> int:
        return sum(self.n_axial(k) for k in self.segments)

    @property
    def view_shape(self):
        return (self.n_planes, self.n_radial_bins)

    @property
    def n_bins(self) -> int:
        return self.n_views * self.n_planes * self.n_radial_bins

    def angle(self, view: int) -> float:
        return view * math.pi / self.n_views

    @property
    def arc_spacing(self) -> float:
        """Uniform radial step of the arc-corrected grid (the central native step)."""
        return self.ring_radius * math.sin(math.pi / self.n_crystals_per_ring)

    def radial_offset(self, m):
        m = np.asarray(m, dtype=float)
        if self.arc_corrected:
            return m * self.arc_spacing
        return self.ring_radius * np.sin(m * math.pi / self.n_crystals_per_ring)

    def ring_z(self, ring):
        return (np.asarray(ring, dtype=float) - 0.5 * (self.n_rings - 1)) * self.ring_spacing

    def fov(self):
        half = (self.n_radial_bins - 1) // 2
        return float(abs(self.radial_offset(half))), 0.5 * self.n_rings * self.ring_spacing

    def segment_offset(self, segment: int) -> int:
        off = 0
        for k in self.segments:
            if k == segment:
                return off
            off += self.n_views * self.n_axial(k) * self.n_radial_bins
        raise InvalidCoord(f"segment {segment} outside +-{self.max_ring_difference}")


ScannerGeometry = Union[ParallelBeam, ConeBeam, CylindricalPet]


class CtCoord(NamedTuple):
    view: int
    row: int
    col: int


class SinogramCoord(NamedTuple):
    segment: int
    view: int
    radial: int
    axial: int


def _check_view(geom, view: int) -> None:
    if not (0 <= int(view) < geom.n_views) or int(view) != view:
        raise InvalidView(f"view {view} outside [0, {geom.n_views})")


def _centered(n: int, spacing: float) -> np.ndarray:
    return (np.arange(n) - 0.5 * (n - 1)) * spacing


def rays_parallel(geom: ParallelBeam, view: int) -> Rays:
    """Rays of one parallel-beam view, shape (nv, nu); unbounded in t.

    Origins lie on a detector plane at a distance beyond the FOV radius.
    """
    _check_view(geom, view)
    th = geom.angle(view)
    d = np.array([-math.sin(th), math.cos(th), 0.0])
    eu = np.array([math.cos(th), math.sin(th), 0.0])
    back = math.hypot(0.5 * geom.nu * geom.bin_spacing, 0.5 * geom.nv * geom.bin_spacing) + geom.bin_spacing
    u = _centered(geom.nu, geom.bin_spacing)
    v = _centered(geom.nv, geom.bin_spacing)
    origins = -back * d + u[None, :, None] * eu + v[:, None, None] * np.array([0.0, 0.0, 1.0])
    dirs = np.broadcast_to(d, origins.shape).copy()
    return Rays(origins, dirs, np.full(origins.shape[:2], -np.inf), np.full(origins.shape[:2], np.inf))


def cone_source(geom: ConeBeam, view: int) -> np.ndarray:
    b = geom.angle(view)
    return geom.dso * np.array([math.sin(b), -math.cos(b), 0.0])


def cone_detector_cells(geom: ConeBeam, view: int) -> np.ndarray:
    """Centres of the detector cells of one view, shape (nv, nu, 3)."""
    b = geom.angle(view)
    d0 = np.array([-math.sin(b), math.cos(b), 0.0])
    eu = np.array([math.cos(b), math.sin(b), 0.0])
    centre = cone_source(geom, view) + geom.dsd * d0
    u = _centered(geom.nu, geom.bin_spacing)
    v = _centered(geom.nv, geom.bin_spacing)
    return centre + u[None, :, None] * eu + v[:, None, None] * np.array([0.0, 0.0, 1.0])


def rays_cone(geom: ConeBeam, view: int) -> Rays:
    """Source-to-cell rays of one cone-beam view, shape (nv, nu)."""
    _check_view(geom, view)
    cells = cone_detector_cells(geom, view)
    src = np.broadcast_to(cone_source(geom, view), cells.shape)
    return Rays.between(src, cells)


def radial_position(geom: CylindricalPet, radial: int) -> float:
    """Signed chord distance from the isocentre of radial bin ``radial``.

    Native bins follow ``R sin(m pi / N)`` for offset ``m`` from the central
    bin, so they bunch up towards the FOV edge; arc-corrected bins use the
    uniform step ``R sin(pi / N)``.
    """
    if not 0 <= radial < geom.n_radial_bins:
        raise InvalidCoord(f"radial bin {radial} outside [0, {geom.n_radial_bins})")
    m = radial - (geom.n_radial_bins - 1) // 2
    return float(geom.radial_offset(m))


def radial_bin_of(geom: CylindricalPet, s: float) -> float:
    """Inverse of :func:`radial_position` (fractional bin index)."""
    if geom.arc_corrected:
        m = s / geom.arc_spacing
    else:
        m = math.asin(s / geom.ring_radius) * geom.n_crystals_per_ring / math.pi
    return m + (geom.n_radial_bins - 1) // 2


def _ring_pair(geom: CylindricalPet, segment: int, axial):
    r1 = np.asarray(axial) + max(0, -segment)
    return r1, r1 + segment


def _pet_endpoints(geom: CylindricalPet, segment: int, view, axial, radial):
    view, axial, radial = np.broadcast_arrays(np.asarray(view), np.asarray(axial), np.asarray(radial))
    phi = view * (math.pi / geom.n_views)
    s = geom.radial_offset(radial - (geom.n_radial_bins - 1) // 2)
    half = np.sqrt(geom.ring_radius ** 2 - s * s)
    c, sn = np.cos(phi), np.sin(phi)
    cx, cy = s * c, s * sn
    r1, r2 = _ring_pair(geom, segment, axial)
    p1 = np.stack([cx + half * sn, cy - half * c, geom.ring_z(r1)], axis=-1)
    p2 = np.stack([cx - half * sn, cy + half * c, geom.ring_z(r2)], axis=-1)
    return p1, p2


def _check_coord(geom: CylindricalPet, coord: SinogramCoord) -> None:
    seg, view, radial, axial = coord
    if abs(seg) > geom.max_ring_difference:
        raise InvalidCoord(f"segment {seg} outside +-{geom.max_ring_difference}")
    if not 0 <= view < geom.n_views:
        raise InvalidCoord(f"view {view} outside [0, {geom.n_views})")
    if not 0 <= radial < geom.n_radial_bins:
        raise InvalidCoord(f"radial bin {radial} outside [0, {geom.n_radial_bins})")
    if not 0 <= axial < geom.n_axial(seg):
        raise InvalidCoord(f"axial index {axial} outside [0, {geom.n_axial(seg)})")


def rays_pet(geom: CylindricalPet, coord: SinogramCoord) -> Ray:
    """The LOR of one sinogram bin, running between its two crystal faces."""
    coord = SinogramCoord(*coord)
    _check_coord(geom, coord)
    p1, p2 = _pet_endpoints(geom, coord.segment, coord.view, coord.axial, coord.radial)
    return make_ray(p1, p2)


def pet_endpoints(geom: CylindricalPet, coord: SinogramCoord):
    coord = SinogramCoord(*coord)
    _check_coord(geom, coord)
    return _pet_endpoints(geom, coord.segment, coord.view, coord.axial, coord.radial)


def _pet_view_rays(geom: CylindricalPet, view: int) -> Rays:
    starts, ends = [], []
    radial = np.arange(geom.n_radial_bins)
    for seg in geom.segments:
        ax = np.arange(geom.n_axial(seg))
        p1, p2 = _pet_endpoints(geom, seg, view, ax[:, None], radial[None, :])
        starts.append(p1)
        ends.append(p2)
    return Rays.between(np.concatenate(starts), np.concatenate(ends))


def view_rays(geom: ScannerGeometry, view: int) -> Rays:
    """Rays of one view with shape ``geom.view_shape``."""
    _check_view(geom, view)
    if isinstance(geom, ParallelBeam):
        return rays_parallel(geom, view)
    if isinstance(geom, ConeBeam):
        return rays_cone(geom, view)
    if isinstance(geom, CylindricalPet):
        return _pet_view_rays(geom, view)
    raise TypeError(f"unsupported geometry {type(geom).__name__}")


def view_index(geom: ScannerGeometry, view: int) -> np.ndarray:
    """Flat data indices of one view, shaped like ``view_rays(geom, view)``."""
    _check_view(geom, view)
    if not isinstance(geom, CylindricalPet):
        n = geom.nu * geom.nv
        return (view * n + np.arange(n)).reshape(geom.view_shape)
    rows = []
    for seg in geom.segments:
        na = geom.n_axial(seg)
        base = geom.segment_offset(seg) + view * na * geom.n_radial_bins
        rows.append(base + np.arange(na * geom.n_radial_bins).reshape(na, geom.n_radial_bins))
    return np.concatenate(rows)


def all_rays(geom: ScannerGeometry) -> Rays:
    """Every bin's ray, flat, in :func:`enumerate_bins` order."""
    if not isinstance(geom, CylindricalPet):
        return Rays.concatenate([view_rays(geom, v) for v in range(geom.n_views)])
    parts = []
    radial = np.arange(geom.n_radial_bins)
    for seg in geom.segments:
        view = np.arange(geom.n_views)[:, None, None]
        ax = np.arange(geom.n_axial(seg))[None, :, None]
        p1, p2 = _pet_endpoints(geom, seg, view, ax, radial[None, None, :])
        parts.append(Rays.between(p1, p2))
    return Rays.concatenate(parts)


def enumerate_bins(geom: ScannerGeometry) -> Iterator[Union[CtCoord, SinogramCoord]]:
    """All bin coordinates in storage order (see module docstring)."""
    if isinstance(geom, CylindricalPet):
        for seg in geom.segments:
            for view in range(geom.n_views):
                for ax in range(geom.n_axial(seg)):
                    for rad in range(geom.n_radial_bins):
                        yield SinogramCoord(seg, view, rad, ax)
    else:
        for view in range(geom.n_views):
            for row in range(geom.nv):
                for col in range(geom.nu):
                    yield CtCoord(view, row, col)


# ---------------------------------------------------------------------------
# key-value config (units spelled out in the key names)
# ---------------------------------------------------------------------------

_KEYS = {
    ParallelBeam: {"detector_nu": "nu", "detector_nv": "nv", "bin_spacing_mm": "bin_spacing",
                   "n_views": "n_views", "angular_range_rad": "angular_range"},
    ConeBeam: {"source_to_isocenter_mm": "dso", "source_to_detector_mm": "dsd", "detector_nu": "nu",
               "detector_nv": "nv", "bin_spacing_mm": "bin_spacing", "n_views": "n_views",
               "angular_range_rad": "angular_range"},
    CylindricalPet: {"ring_radius_mm": "ring_radius", "n_crystals_per_ring": "n_crystals_per_ring",
                     "n_rings": "n_rings", "ring_spacing_mm": "ring_spacing",
                     "n_radial_bins": "n_radial_bins", "n_views": "n_views",
                     "max_ring_difference": "max_ring_difference", "arc_corrected": "arc_corrected"},
}
_TYPES = {"parallel": ParallelBeam, "cone": ConeBeam, "pet": CylindricalPet}
_INT_FIELDS = {"nu", "nv", "n_views", "n_crystals_per_ring", "n_rings", "n_radial_bins", "max_ring_difference"}


def geometry_to_config(geom: ScannerGeometry) -> dict:
    kind = {v: k for k, v in _TYPES.items()}[type(geom)]
    values = asdict(geom)
    out = {"geometry": kind}
    for key, name in _KEYS[type(geom)].items():
        out[key] = values[name]
    return out


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def geometry_from_config(cfg: dict) -> ScannerGeometry:
    kind = str(cfg.get("geometry", "")).strip().lower()
    if kind not in _TYPES:
        raise ConfigError(f"geometry must be one of {sorted(_TYPES)}, got {kind!r}")
    cls = _TYPES[kind]
    kwargs = {}
    for key, name in _KEYS[cls].items():
        if key not in cfg:
            continue
        raw = cfg[key]
        try:
            if name == "arc_corrected":
                kwargs[name] = _as_bool(raw)
            elif name in _INT_FIELDS:
                kwargs[name] = int(raw)
            else:
                kwargs[name] = float(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"incomplete {kind} geometry: {exc}") from exc

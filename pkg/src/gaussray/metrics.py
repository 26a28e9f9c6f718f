"""Voxelization of Gaussian clouds and the image-quality figures of merit."""

from __future__ import annotations

import csv
import math
from typing import Iterable, Optional, Sequence

import numba
import numpy as np
from scipy import ndimage

from .accel import cloud_aabbs
from .errors import AmbiguousPeak, NoPeak, OutOfGrid, RoiOutOfGrid, ShapeMismatch, ZeroBackground
from .model import GaussianCloud
from .projector import pack
from .volume import VolumeGrid

PSNR_CAP = 200.0  # dB, reported for identical volumes
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
BACKGROUND_CUBE = 20  # voxels per side
VOXEL_K_SIGMA = 4.5  # stamping is cheap; keep the truncated tail under 1e-4 of the peak

_AXES = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}


@numba.njit(cache=True, nogil=True)
def _stamp(mu, P, rho, lo, hi, origin, spacing, out, g0, g1):
    nz, ny, nx = out.shape
    for g in range(g0, g1):
        if rho[g] == 0.0:
            continue
        i0 = max(0, int(math.ceil((lo[g, 0] - origin[0]) / spacing[0] - 0.5)))
        i1 = min(nx - 1, int(math.floor((hi[g, 0] - origin[0]) / spacing[0] - 0.5)))
        j0 = max(0, int(math.ceil((lo[g, 1] - origin[1]) / spacing[1] - 0.5)))
        j1 = min(ny - 1, int(math.floor((hi[g, 1] - origin[1]) / spacing[1] - 0.5)))
        k0 = max(0, int(math.ceil((lo[g, 2] - origin[2]) / spacing[2] - 0.5)))
        k1 = min(nz - 1, int(math.floor((hi[g, 2] - origin[2]) / spacing[2] - 0.5)))
        p = P[g]
        for k in range(k0, k1 + 1):
            z = origin[2] + (k + 0.5) * spacing[2] - mu[g, 2]
            for j in range(j0, j1 + 1):
                y = origin[1] + (j + 0.5) * spacing[1] - mu[g, 1]
                for i in range(i0, i1 + 1):
                    x = origin[0] + (i + 0.5) * spacing[0] - mu[g, 0]
                    q = (p[0] * x * x + p[1] * y * y + p[2] * z * z
                         + 2.0 * (p[3] * x * y + p[4] * x * z + p[5] * y * z))
                    out[k, j, i] += rho[g] * math.exp(-0.5 * q)


def voxelize(cloud: GaussianCloud, grid: VolumeGrid, k_sigma: float = VOXEL_K_SIGMA) -> VolumeGrid:
    """Sample the mixture at voxel centres, each Gaussian only inside its k-sigma box."""
    out = np.zeros(grid.dims[::-1])
    if len(cloud):
        mu, P, rho = pack(cloud)
        lo, hi = cloud_aabbs(cloud, k_sigma)
        _stamp(mu, P, rho, lo, hi, grid.origin, grid.spacing, out, 0, len(cloud))
    return grid.like(out)


def _values(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, VolumeGrid) else v, dtype=float)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")


def psnr(volume, reference) -> float:
    """10 log10(peak^2 / MSE) with the peak taken from ``reference``."""
    v, r = _values(volume), _values(reference)
    _same_shape(v, r)
    mse = float(np.mean((v - r) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    peak = float(np.max(r))
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse)) if peak > 0 else -math.inf


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def ssim3d(volume, reference, data_range: Optional[float] = None) -> float:
    """Mean SSIM over all voxels whose 11^3 Gaussian window fits in the volume.

    ``data_range`` defaults to ``max(reference)``; that is the only asymmetry
    between the two arguments.
    """
    v, r = _values(volume), _values(reference)
    _same_shape(v, r)
    if min(v.shape) < SSIM_WINDOW:
        raise ShapeMismatch(f"volume {v.shape} smaller than the {SSIM_WINDOW}^3 window")
    L = float(np.max(r)) if data_range is None else float(data_range)
    if L <= 0:
        L = 1.0
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    w = gaussian_window()
    half = SSIM_WINDOW // 2

    def filt(a):
        for ax in range(3):
            a = ndimage.correlate1d(a, w, axis=ax, mode="constant")
        return a[half:-half, half:-half, half:-half]

    mx, my = filt(v), filt(r)
    sxx = filt(v * v) - mx * mx
    syy = filt(r * r) - my * my
    sxy = filt(v * r) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(np.mean(s))


def line_profile(volume: VolumeGrid, axis, through) -> np.ndarray:
    """Nearest-voxel row of ``volume`` along ``axis`` through the point ``through``."""
    a = _AXES[axis]
    idx = volume.index_of(through)
    other = [i for i in range(3) if i != a]
    if any(not 0 <= idx[i] < volume.dims[i] for i in other) or not (
            volume.origin[a] <= through[a] <= volume.origin[a] + volume.dims[a] * volume.spacing[a]):
        raise OutOfGrid(f"point {tuple(through)} lies outside the grid")
    sl = [int(idx[2]), int(idx[1]), int(idx[0])]
    sl[2 - a] = slice(None)
    return np.asarray(volume.data[tuple(sl)], dtype=float).copy()


def fwhm(profile, spacing: float = 1.0) -> float:
    """Full width at half maximum above a background level.

    The background is the median of the outer 10% of samples (5% per side,
    at least one each). Crossings of the half level are linearly
    interpolated on each side of the global maximum.
    """
    y = np.asarray(profile, dtype=float)
    n = len(y)
    if n < 3:
        raise NoPeak("profile too short")
    edge = max(1, int(round(0.05 * n)))
    background = float(np.median(np.concatenate([y[:edge], y[-edge:]])))
    peak_i = int(np.argmax(y))
    peak = y[peak_i]
    if not peak > background:
        raise NoPeak("profile has no maximum above its background")
    tol = 1e-12 * max(abs(peak), 1.0)
    if np.count_nonzero(y >= peak - tol) > n // 2:
        raise AmbiguousPeak("plateau at the maximum spans more than half the profile")
    half = background + 0.5 * (peak - background)

    i = peak_i
    while i > 0 and y[i - 1] >= half:
        i -= 1
    if i == 0:
        raise NoPeak("profile never falls below half maximum on the left")
    left = (i - 1) + (half - y[i - 1]) / (y[i] - y[i - 1])
    j = peak_i
    while j < n - 1 and y[j + 1] >= half:
        j += 1
    if j == n - 1:
        raise NoPeak("profile never falls below half maximum on the right")
    right = j + (y[j] - half) / (y[j] - y[j + 1])
    return float((right - left) * spacing)


def sphere_mask(volume: VolumeGrid, center, diameter: float) -> np.ndarray:
    c = np.asarray(center, dtype=float)
    pts = volume.centers()
    return np.sum((pts - c) ** 2, axis=-1) <= (0.5 * diameter) ** 2


def _sphere_roi(volume: VolumeGrid, center, diameter: float) -> np.ndarray:
    c = np.asarray(center, dtype=float)
    lo = volume.origin
    hi = volume.origin + np.array(volume.dims) * volume.spacing
    r = 0.5 * diameter
    if np.any(c - r < lo) or np.any(c + r > hi):
        raise RoiOutOfGrid(f"sphere ROI at {tuple(c)} (d={diameter}) leaves the grid")
    mask = sphere_mask(volume, c, diameter)
    if not mask.any():
        raise RoiOutOfGrid("sphere ROI contains no voxel centre")
    return np.asarray(volume.data, dtype=float)[mask]


def background_cube(volume: VolumeGrid, center, size: int = BACKGROUND_CUBE) -> np.ndarray:
    """Values in the ``size``^3 voxel cube around ``center``."""
    idx = volume.index_of(center)
    lo = idx - size // 2
    hi = lo + size
    if np.any(lo < 0) or np.any(hi > np.array(volume.dims)):
        raise RoiOutOfGrid(f"background cube at {tuple(center)} leaves the grid")
    return np.asarray(volume.data[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]], dtype=float)


def sbr(volume: VolumeGrid, sphere_center, measured_diameter: float, background_center) -> float:
    """Mean inside the sphere ROI over the mean of the 20^3 background cube."""
    signal = _sphere_roi(volume, sphere_center, measured_diameter).mean()
    bg = background_cube(volume, background_center).mean()
    if bg == 0:
        raise ZeroBackground("background ROI has zero mean")
    return float(signal / bg)


def roi_std(volume: VolumeGrid, sphere_center, diameter: float) -> float:
    """Population standard deviation inside a spherical ROI."""
    return float(np.std(_sphere_roi(volume, sphere_center, diameter)))


def write_csv(path, rows: Iterable[Sequence], header: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)

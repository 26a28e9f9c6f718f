"""Fitting a Gaussian cloud to measured projections.

The loop renders a few views at a time, scores them against the data with
an L1 + SSIM loss, backpropagates through the closed-form projector and
takes an Adam step. Every ``densify_interval`` steps Gaussians with small
density are pruned and those with large position gradients are cloned or
split.

Internally the data are divided by their mean and densities by the same
factor, so loss values and gradient thresholds do not depend on the units
of the input. ``lr_rho`` and ``prune_rho`` are expressed as fractions of the
initial density when ``relative_rho`` is set (the default).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from . import accel
from .errors import ConfigError, NonFiniteLoss, ShapeMismatch, StateMismatch
from .geometry import ScannerGeometry, all_rays, view_index
from .model import SCALE_MIN, GaussianCloud, Rays
from .phantom import Cylinder, ProjectionSet
from .projector import RayGradients, backproject, pack, render

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SPLIT_FACTOR = 1.6
CLONE_JITTER = 0.1  # sigma units
SPLIT_OFFSET = 0.5  # sigma units


@dataclass
class TrainConfig:
    """Hyperparameters of :func:`reconstruct`.

    ``lr_mu`` and ``densify_split_scale`` default to fractions of the FOV
    extent (2e-4 and 1e-2); ``scale_max`` defaults to half of it.
    """

    iterations: int = 1000
    batch_views: int = 4
    lr_mu: Optional[float] = None
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_rho: float = 5e-2
    lr_final_factor: float = 1.0
    relative_rho: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    loss: str = "l1_ssim"
    loss_lambda: float = 0.25
    densify_interval: int = 100
    densify_start: int = 100
    densify_grad_threshold: float = 2e-4
    densify_split_scale: Optional[float] = None
    prune_rho: float = 5e-3
    densify_stop_fraction: float = 0.75
    max_gaussians: int = 100_000
    init_n_gaussians: int = 5000
    init_scheme: str = "uniform"
    init_scale_mm: Optional[float] = None
    init_fov_radius_mm: Optional[float] = None
    init_fov_half_height_mm: Optional[float] = None
    init_rho_fit_iters: int = 0
    init_rho_fit_subsets: int = 1
    scale_min: float = SCALE_MIN
    scale_max: Optional[float] = None
    k_sigma: float = accel.DEFAULT_K_SIGMA
    seed: int = 0
    workers: int = 1
    log_interval: int = 50

    def __post_init__(self):
        rates = [self.lr_log_scale, self.lr_rotation, self.lr_rho]
        if self.lr_mu is not None:
            rates.append(self.lr_mu)
        if min(rates) <= 0 or self.lr_final_factor <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise ConfigError("loss_lambda must lie in [0, 1]")
        if not 0.0 < self.densify_stop_fraction <= 1.0:
            raise ConfigError("densify_stop_fraction must lie in (0, 1]")
        if self.iterations < 0 or self.batch_views < 1 or self.densify_interval < 1:
            raise ConfigError("iterations >= 0, batch_views >= 1 and densify_interval >= 1 required")
        if self.init_n_gaussians < 1:
            raise ConfigError("init_n_gaussians must be >= 1")
        if self.init_scheme != "uniform":
            raise ConfigError(f"unknown init scheme {self.init_scheme!r}")
        if self.loss not in ("l1_ssim", "l2"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0 or self.eps <= 0:
            raise ConfigError("Adam needs 0 <= beta < 1 and eps > 0")
        if self.k_sigma <= 0 or self.scale_min <= 0 or self.max_gaussians < 1 or self.workers < 1:
            raise ConfigError("k_sigma, scale_min, max_gaussians and workers must be positive")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(names))
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(unknown)}")
        kw = {}
        for k, v in values.items():
            default = names[k].default
            try:
                if isinstance(default, bool):
                    kw[k] = bool(v)
                elif isinstance(default, int):
                    kw[k] = int(v)
                elif isinstance(default, float) or (default is None and v is not None):
                    kw[k] = float(v)
                else:
                    kw[k] = v
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {k}: {v!r}") from None
        return cls(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


def _blur(a: np.ndarray) -> np.ndarray:
    w = _window()
    for ax in range(a.ndim):
        a = ndimage.correlate1d(a, w, axis=ax, mode="constant")
    return a


def ssim2d(x: np.ndarray, y: np.ndarray, data_range: Optional[float] = None, grad: bool = False):
    """Mean SSIM of two images under an 11-tap Gaussian window.

    The window is truncated at the image border and renormalized, so every
    pixel gets a local estimate. With ``grad`` the derivative of the mean
    w.r.t. ``x`` is returned as well.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    L = float(np.max(y)) if data_range is None else float(data_range)
    if L <= 0:
        L = 1.0
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    norm = _blur(np.ones_like(x))
    f = lambda a: _blur(a) / norm
    mx, my = f(x), f(y)
    exx, eyy, exy = f(x * x), f(y * y), f(x * y)
    a1 = 2 * mx * my + c1
    a2 = 2 * (exy - mx * my) + c2
    b1 = mx * mx + my * my + c1
    b2 = (exx - mx * mx) + (eyy - my * my) + c2
    s = a1 * a2 / (b1 * b2)
    value = float(np.mean(s))
    if not grad:
        return value
    # S as a function of (mx, exx, exy); the covariance terms carry mx too
    ds_dmx = s * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2)
    ds_dexy = 2 * s / a2
    ds_dexx = -s / b2
    n = x.size
    adj = lambda g: _blur(g / norm)
    gx = (adj(ds_dmx) + 2 * x * adj(ds_dexx) + y * adj(ds_dexy)) / n
    return value, gx


def projection_loss(rendered, measured, lam: float = 0.25, kind: str = "l1_ssim"):
    """Loss between one rendered and one measured view, and its gradient w.r.t. ``rendered``.

    ``l1_ssim`` is ``(1 - lam) * mean|r - m| + lam * (1 - SSIM(r, m))``;
    ``l2`` is the mean squared difference.
    """
    r = np.asarray(rendered, dtype=float)
    m = np.asarray(measured, dtype=float)
    if r.shape != m.shape:
        raise ShapeMismatch(f"rendered {r.shape} vs measured {m.shape}")
    if r.ndim == 1:
        r, m = r[None, :], m[None, :]
    diff = r - m
    n = diff.size
    if kind == "l2":
        return float(np.mean(diff ** 2)), (2.0 * diff / n).reshape(np.shape(rendered))
    if kind != "l1_ssim":
        raise ConfigError(f"unknown loss {kind!r}")
    loss = (1.0 - lam) * float(np.mean(np.abs(diff)))
    g = (1.0 - lam) * np.sign(diff) / n
    if lam > 0:
        s, gs = ssim2d(r, m, grad=True)
        loss += lam * (1.0 - s)
        g = g - lam * gs
    return loss, g.reshape(np.shape(rendered))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

GROUPS = ("mu", "log_scale", "rotation", "rho")
_GRAD_FIELD = {"mu": "d_mu", "log_scale": "d_log_scale", "rotation": "d_rotation", "rho": "d_rho"}


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, cloud: GaussianCloud) -> "AdamState":
        return cls({k: np.zeros_like(getattr(cloud, k)) for k in GROUPS},
                   {k: np.zeros_like(getattr(cloud, k)) for k in GROUPS})

    def __len__(self) -> int:
        return len(self.m["rho"])

    def reindex(self, index: np.ndarray, fresh: np.ndarray) -> "AdamState":
        """Moments gathered through ``index``; entries flagged ``fresh`` restart at zero."""
        m = {k: a[index].copy() for k, a in self.m.items()}
        v = {k: a[index].copy() for k, a in self.v.items()}
        for d in (m, v):
            for a in d.values():
                a[fresh] = 0.0
        return AdamState(m, v, self.step)


def learning_rates(config: TrainConfig, fov_extent: float = 1.0, rho_ref: float = 1.0) -> dict:
    lr_mu = config.lr_mu if config.lr_mu is not None else 2e-4 * fov_extent
    lr_rho = config.lr_rho * (rho_ref if config.relative_rho else 1.0)
    return {"mu": lr_mu, "log_scale": config.lr_log_scale, "rotation": config.lr_rotation, "rho": lr_rho}


def adam_step(cloud: GaussianCloud, grads: RayGradients, state: AdamState, config: TrainConfig,
              lr: Optional[dict] = None):
    """One Adam update of every parameter group, then the feasibility projections.

    Updates ``cloud`` and ``state`` in place and returns both. ``lr`` maps
    group names to step sizes (see :func:`learning_rates`).
    """
    m = len(cloud)
    if len(state) != m or any(len(getattr(grads, f)) != m for f in _GRAD_FIELD.values()):
        raise StateMismatch(f"state has {len(state)} entries, cloud {m}, gradients {len(grads.d_rho)}")
    lr = lr or learning_rates(config)
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k in GROUPS:
        g = getattr(grads, _GRAD_FIELD[k])
        mk, vk = state.m[k], state.v[k]
        mk *= b1
        mk += (1.0 - b1) * g
        vk *= b2
        vk += (1.0 - b2) * g * g
        p = getattr(cloud, k)
        p -= lr[k] * (mk / c1) / (np.sqrt(vk / c2) + config.eps)
    cloud.project_constraints(config.scale_min, config.scale_max or np.inf)
    return cloud, state


# ---------------------------------------------------------------------------
# densify and prune
# ---------------------------------------------------------------------------


def _densify(cloud: GaussianCloud, grad_norms: np.ndarray, config: TrainConfig,
             iteration: Optional[int] = None, grad_dirs: Optional[np.ndarray] = None,
             split_scale: Optional[float] = None):
    """Returns the new cloud, the source index of each new Gaussian and a fresh-entry mask."""
    m = len(cloud)
    norms = np.asarray(grad_norms, dtype=float).reshape(-1)
    if len(norms) != m:
        raise ShapeMismatch(f"{len(norms)} gradient norms for {m} Gaussians")
    keep = cloud.rho >= config.prune_rho
    grow = keep & (norms > config.densify_grad_threshold)
    if iteration is not None and iteration >= config.iterations * config.densify_stop_fraction:
        grow[:] = False
    room = config.max_gaussians - int(keep.sum())
    idx = np.flatnonzero(grow)
    if len(idx) > max(room, 0):
        # the strongest gradients win when the cap binds; ties by index
        idx = idx[np.lexsort((idx, -norms[idx]))][:max(room, 0)]
        idx.sort()
    grow[:] = False
    grow[idx] = True

    scale = cloud.scale
    threshold = split_scale if split_scale is not None else (
        config.densify_split_scale if config.densify_split_scale is not None else np.inf)
    split = grow & (scale.max(axis=1) > threshold)
    clone = grow & ~split
    R = cloud.rotation_matrices()

    new = cloud.subset(keep & ~split)
    source = np.flatnonzero(keep & ~split)
    fresh = np.zeros(len(source), bool)
    if clone.any():
        ci = np.flatnonzero(clone)
        if grad_dirs is not None:
            u = -np.asarray(grad_dirs, dtype=float)[ci]
            nrm = np.linalg.norm(u, axis=1, keepdims=True)
            major = R[ci, :, np.argmax(scale[ci], axis=1)]
            u = np.where(nrm > 0, u / np.where(nrm > 0, nrm, 1.0), major)
        else:
            u = R[ci, :, np.argmax(scale[ci], axis=1)]
        sigma_u = np.sqrt(np.einsum("mi,mij,mj->m", u, cloud.covariances()[ci], u))
        kids = cloud.subset(ci)
        kids.mu = kids.mu + CLONE_JITTER * sigma_u[:, None] * u
        # the parent keeps its place; parent and clone share its density
        pos = np.searchsorted(source, ci)
        new.rho[pos] *= 0.5
        kids.rho *= 0.5
        new = new.concatenate(kids)
        source = np.concatenate([source, ci])
        fresh = np.concatenate([fresh, np.ones(len(ci), bool)])
    if split.any():
        si = np.flatnonzero(split)
        j = np.argmax(scale[si], axis=1)
        axis = R[si, :, j]
        off = SPLIT_OFFSET * scale[si, j][:, None] * axis
        for sign in (-1.0, 1.0):
            kids = cloud.subset(si)
            kids.mu = kids.mu + sign * off
            kids.log_scale = kids.log_scale - math.log(SPLIT_FACTOR)
            new = new.concatenate(kids)
            source = np.concatenate([source, si])
            fresh = np.concatenate([fresh, np.ones(len(si), bool)])
    new.project_constraints(config.scale_min, config.scale_max or np.inf)
    return new, source, fresh


def densify_and_prune(cloud: GaussianCloud, grad_norms, config: TrainConfig, iteration: Optional[int] = None,
                      grad_dirs: Optional[np.ndarray] = None) -> GaussianCloud:
    """Prune low-density Gaussians, then clone or split those with large position gradients.

    ``grad_norms`` are mean position-gradient norms. A Gaussian above the
    threshold is split in two along its major axis when its largest scale
    exceeds ``densify_split_scale`` and cloned otherwise; the clone moves
    0.1 sigma down ``grad_dirs`` (or along the major axis). Survivors keep
    their order; clones and split children are appended.
    """
    return _densify(cloud, grad_norms, config, iteration, grad_dirs)[0]


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _fov(geom: ScannerGeometry, config: TrainConfig):
    radius, half_height = geom.fov()
    if config.init_fov_radius_mm is not None:
        radius = float(config.init_fov_radius_mm)
    if config.init_fov_half_height_mm is not None:
        half_height = float(config.init_fov_half_height_mm)
    return float(radius), float(half_height)


def lattice_positions(n: int, radius: float, half_height: float, seed: int) -> np.ndarray:
    """``n`` jittered points of a cubic lattice filling a z-aligned cylinder."""
    if n == 1:
        return np.zeros((1, 3))
    rng = np.random.default_rng(seed)
    volume = math.pi * radius ** 2 * 2 * half_height
    h = (volume / n) ** (1.0 / 3.0)
    while True:
        nx = int(radius // h)
        nz = int(half_height // h)
        ax = np.arange(-nx, nx + 1) * h
        az = np.arange(-nz, nz + 1) * h
        X, Y, Z = np.meshgrid(ax, ax, az, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        pts = pts[pts[:, 0] ** 2 + pts[:, 1] ** 2 <= radius ** 2]
        if len(pts) >= n:
            break
        h *= 0.97
    pts = pts[np.sort(rng.choice(len(pts), n, replace=False))]
    moved = pts + rng.uniform(-0.25 * h, 0.25 * h, pts.shape)
    inside = (moved[:, 0] ** 2 + moved[:, 1] ** 2 <= radius ** 2) & (np.abs(moved[:, 2]) <= half_height)
    return np.where(inside[:, None], moved, pts)


def _mean_chord(geom: ScannerGeometry, radius: float, half_height: float, rays: Optional[Rays] = None) -> float:
    rays = all_rays(geom) if rays is None else rays
    flat = rays.flat()
    step = max(1, len(flat) // 20000)
    sub = flat.take(slice(None, None, step))
    chord = Cylinder((0, 0, 0), radius, max(half_height, 1e-6), 1.0).chord(sub.origins, sub.directions)
    return float(np.mean(chord))


def initialize(geom: ScannerGeometry, measured: ProjectionSet, config: TrainConfig,
               rays: Optional[Rays] = None) -> GaussianCloud:
    """Isotropic Gaussians on a jittered lattice inside the cylindrical FOV.

    The common density is chosen so that a ray's expected sum of integrals
    matches the data mean: with number density n/V, scale s and mean chord
    L, a ray meets about (n/V) L 2 pi s^2 effective Gaussians, each
    contributing rho sqrt(2 pi) s.
    """
    n = config.init_n_gaussians
    radius, half_height = _fov(geom, config)
    pos = lattice_positions(n, radius, half_height, config.seed)
    s = config.init_scale_mm if config.init_scale_mm is not None else 2 * radius / n ** (1.0 / 3.0)
    s = float(np.clip(s, config.scale_min, config.scale_max or np.inf))
    volume = math.pi * radius ** 2 * 2 * max(half_height, 0.5 * s)
    count = n / volume * _mean_chord(geom, radius, half_height, rays) * 2 * math.pi * s * s
    mean = float(np.mean(measured.data))
    rho = mean / (max(count, 1e-12) * math.sqrt(2 * math.pi) * s) if mean > 0 else 0.0
    return GaussianCloud(pos, np.full((n, 3), math.log(s)), None, np.full(n, rho))


def fit_densities(cloud: GaussianCloud, rays: Rays, data: np.ndarray, iterations: int,
                  bvh: Optional[accel.Bvh] = None, workers: int = 1, subsets=None) -> GaussianCloud:
    """Multiplicative EM updates of the densities with every other parameter frozen.

    ``subsets`` is a list of flat ray-index arrays; each EM iteration then
    sweeps them in order with one update per subset (ordered subsets).
    """
    data = np.asarray(data, dtype=float).reshape(-1)
    if iterations <= 0 or not len(cloud):
        return cloud
    bvh = bvh or accel.build(cloud)
    flat = rays.flat()
    subsets = subsets or [np.arange(len(data))]
    parts = [(flat.take(s), data[s]) for s in subsets]
    sens = [backproject(cloud, r, np.ones(len(y)), bvh, workers, rho_only=True).d_rho for r, y in parts]
    for _ in range(iterations):
        for (r, y), sn in zip(parts, sens):
            est = render(cloud, r, bvh, workers).reshape(-1)
            ratio = np.where(est > 0, y / np.where(est > 0, est, 1.0), 0.0)
            back = backproject(cloud, r, ratio, bvh, workers, rho_only=True).d_rho
            live = sn > 0
            cloud.rho = np.where(live, cloud.rho * back / np.where(live, sn, 1.0), cloud.rho)
    return cloud


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan
    checksum: str = ""
    wall_time: float = 0.0
    data_scale: float = 1.0

    def log_lines(self) -> list:
        return [json.dumps(r, sort_keys=True) for r in self.records]

    def write_log(self, path, append: bool = True) -> None:
        with open(path, "a" if append else "w") as fh:
            for line in self.log_lines():
                fh.write(line + "\n")
            fh.write(json.dumps({"initial_loss": self.initial_loss, "final_loss": self.final_loss,
                                 "checksum": self.checksum, "wall_time": self.wall_time}, sort_keys=True) + "\n")


class _Views:
    """Rays and data of every view, in storage order."""

    def __init__(self, measured: ProjectionSet):
        geom = measured.geometry
        self.geom = geom
        self.rays = all_rays(geom)
        self.index = [view_index(geom, v) for v in range(geom.n_views)]
        self.data = np.asarray(measured.data, dtype=float)

    def batch(self, views):
        idx = np.concatenate([self.index[v].ravel() for v in views])
        return self.rays.take(idx), idx


def _batch_loss(rendered: np.ndarray, views, data: np.ndarray, index, config: TrainConfig):
    loss = 0.0
    up = np.empty(len(rendered))
    pos = 0
    nb = len(views)
    for v in views:
        shape = index[v].shape
        n = index[v].size
        l, g = projection_loss(rendered[pos:pos + n].reshape(shape), data[index[v]], config.loss_lambda, config.loss)
        loss += l / nb
        up[pos:pos + n] = g.ravel() / nb
        pos += n
    return loss, up


def full_loss(cloud: GaussianCloud, measured: ProjectionSet, config: TrainConfig, bvh=None,
              views: Optional[_Views] = None, scale: float = 1.0) -> float:
    """Loss averaged over every view of ``measured`` (data divided by ``scale``)."""
    views = views or _Views(measured)
    bvh = bvh or accel.build(cloud, config.k_sigma)
    est = render(cloud, views.rays, bvh, config.workers)
    allv = list(range(views.geom.n_views))
    return _batch_loss(est[np.concatenate([views.index[v].ravel() for v in allv])], allv,
                       views.data / scale, views.index, config)[0]


def _diagnose(cloud: GaussianCloud, it: int, loss: float) -> str:
    sc = cloud.scale if len(cloud) else np.zeros((0, 3))
    bad = int(np.sum(~np.isfinite(cloud.mu).all(axis=1))) if len(cloud) else 0
    return (f"loss={loss} at iteration {it}; M={len(cloud)}; rho range "
            f"[{cloud.rho.min() if len(cloud) else 0}, {cloud.rho.max() if len(cloud) else 0}]; "
            f"scale range [{sc.min() if len(sc) else 0}, {sc.max() if len(sc) else 0}]; "
            f"{bad} Gaussians with non-finite positions")


def reconstruct(measured: ProjectionSet, config: TrainConfig, init: Optional[GaussianCloud] = None):
    """Fit a Gaussian cloud to ``measured``; returns ``(cloud, report)``.

    With ``workers == 1`` the run is bit-for-bit reproducible for a fixed
    seed; other worker counts are reproducible for that same count.
    """
    t_start = time.perf_counter()
    geom = measured.geometry
    views = _Views(measured)
    scale = float(np.mean(views.data))
    if not scale > 0:
        scale = 1.0
    data = views.data / scale
    normalized = ProjectionSet(geom, data)

    radius, half_height = _fov(geom, config)
    extent = 2.0 * max(radius, half_height)
    if init is None:
        cloud = initialize(geom, normalized, config, views.rays)
    else:
        cloud = init.copy()
        cloud.rho = cloud.rho / scale
    if config.scale_max is None:
        config = dataclasses.replace(config, scale_max=0.5 * extent)
    cloud.project_constraints(config.scale_min, config.scale_max)
    if config.init_rho_fit_iters > 0:
        groups = [np.concatenate([views.index[v].ravel() for v in range(k, geom.n_views, config.init_rho_fit_subsets)])
                  for k in range(min(config.init_rho_fit_subsets, geom.n_views))]
        cloud = fit_densities(cloud, views.rays, data, config.init_rho_fit_iters,
                              accel.build(cloud, config.k_sigma), config.workers, groups)
    positive = cloud.rho[cloud.rho > 0]
    rho_ref = float(np.mean(positive)) if len(positive) else 1.0
    split_scale = config.densify_split_scale if config.densify_split_scale is not None else 0.01 * extent
    local = dataclasses.replace(config, densify_split_scale=split_scale,
                                prune_rho=config.prune_rho * (rho_ref if config.relative_rho else 1.0))
    lr0 = learning_rates(config, extent, rho_ref)
    if config.init_rho_fit_iters > 0:
        # the density fit leaves empty space nearly empty; drop it before the costly loop
        cloud = cloud.subset(cloud.rho >= local.prune_rho)

    report = TrainReport(data_scale=scale)
    bvh = accel.build(cloud, config.k_sigma)
    report.initial_loss = full_loss(cloud, measured, config, bvh, views, scale)
    state = AdamState.zeros(cloud)
    rng = np.random.default_rng(config.seed)
    queue: list = []
    grad_acc = np.zeros(len(cloud))
    dir_acc = np.zeros((len(cloud), 3))
    hits = np.zeros(len(cloud))

    for it in range(1, config.iterations + 1):
        while len(queue) < config.batch_views:
            queue.extend(rng.permutation(geom.n_views).tolist())
        batch, queue = queue[:config.batch_views], queue[config.batch_views:]
        rays, _ = views.batch(batch)
        packed = pack(cloud) if len(cloud) else None
        est = render(cloud, rays, bvh, config.workers, packed)
        loss, up = _batch_loss(est, batch, data, views.index, config)
        if not math.isfinite(loss):
            raise NonFiniteLoss(_diagnose(cloud, it, loss))
        if len(cloud):
            grads = backproject(cloud, rays, up, bvh, config.workers, packed)
            if not grads.is_finite():
                raise NonFiniteLoss(_diagnose(cloud, it, loss) + "; non-finite gradients")
            seen = grads.d_rho != 0
            grad_acc += np.linalg.norm(grads.d_mu, axis=1)
            dir_acc += grads.d_mu
            hits += seen
            decay = config.lr_final_factor ** ((it - 1) / max(config.iterations - 1, 1))
            lr = {k: v * decay for k, v in lr0.items()}
            adam_step(cloud, grads, state, config, lr)
            bvh.refit(cloud)

        if it % config.log_interval == 0 or it == config.iterations:
            report.records.append({"iteration": it, "loss": loss, "M": len(cloud),
                                   "wall_time": time.perf_counter() - t_start})
            log.info("iteration %d loss %.6g M %d", it, loss, len(cloud))

        if it >= config.densify_start and it % config.densify_interval == 0 and it < config.iterations:
            mean_norm = grad_acc / np.maximum(hits, 1)
            cloud, src, fresh = _densify(cloud, mean_norm, local, it, dir_acc)
            state = state.reindex(src, fresh)
            bvh = accel.build(cloud, config.k_sigma)
            grad_acc = np.zeros(len(cloud))
            dir_acc = np.zeros((len(cloud), 3))
            hits = np.zeros(len(cloud))

    report.final_loss = full_loss(cloud, measured, config, bvh, views, scale)
    cloud.rho = cloud.rho * scale
    report.checksum = cloud.checksum()
    report.wall_time = time.perf_counter() - t_start
    return cloud, report

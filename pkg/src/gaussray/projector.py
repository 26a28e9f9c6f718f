"""Closed-form line integrals of a Gaussian mixture, and their gradients.

Along the ray o + t d a single Gaussian's exponent is the quadratic
-(C + 2 B t + A t^2) / 2 with A = d'P d, B = d'P delta, C = delta'P delta,
P = Sigma^-1 and delta = o - mu. Integrating over the whole line gives

    rho * sqrt(2 pi / A) * exp(-(C - B^2 / A) / 2).

The batched kernels shift the origin to the point of the line closest to mu
before forming B and C. The integral is invariant to sliding o along d, and
the shift removes the cancellation in C - B^2/A when the ray origin sits far
from the primitive (PET crystals are ~400 mm away from millimetre Gaussians).

Gradients are written out by hand. Per (ray, Gaussian) pair the kernels
accumulate dI/drho, dI/dmu and the symmetric matrix dI/dP; the chain rule to
log-scale and quaternion runs once per Gaussian afterwards because P depends
on those parameters only.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from . import accel
from .model import Gaussian, GaussianCloud, Ray, Rays, inverse_covariance

A_FLOOR = 1e-12
EXP_CUTOFF = 700.0  # exponents beyond this underflow to denormals; the term is dropped
SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class QuadraticCoeffs:
    A: float
    B: float
    C: float

    def exponent(self, t):
        return -0.5 * (self.C + 2.0 * self.B * t + self.A * np.square(t))


@dataclass
class RayGradients:
    """Partials of a (weighted) sum of ray integrals w.r.t. every Gaussian.

    ``d_rotation`` is tangent to the unit quaternion sphere.
    """

    d_rho: np.ndarray
    d_mu: np.ndarray
    d_log_scale: np.ndarray
    d_rotation: np.ndarray

    @classmethod
    def zeros(cls, m: int) -> "RayGradients":
        return cls(np.zeros(m), np.zeros((m, 3)), np.zeros((m, 3)), np.zeros((m, 4)))

    def __add__(self, other: "RayGradients") -> "RayGradients":
        return RayGradients(self.d_rho + other.d_rho, self.d_mu + other.d_mu,
                            self.d_log_scale + other.d_log_scale, self.d_rotation + other.d_rotation)

    def scaled(self, k: float) -> "RayGradients":
        return RayGradients(k * self.d_rho, k * self.d_mu, k * self.d_log_scale, k * self.d_rotation)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.d_rho, self.d_mu, self.d_log_scale, self.d_rotation))


# ---------------------------------------------------------------------------
# scalar reference API
# ---------------------------------------------------------------------------


def quadratic_coeffs(g: Gaussian, r: Ray) -> QuadraticCoeffs:
    P = inverse_covariance(g)
    d = r.direction
    delta = r.origin - g.mu
    Pd = P @ d
    return QuadraticCoeffs(float(d @ Pd), float(delta @ Pd), float(delta @ P @ delta))


def integrate_gaussian(g: Gaussian, r: Ray) -> float:
    if g.rho == 0.0:
        return 0.0
    q = quadratic_coeffs(g, r)
    a = max(q.A, A_FLOOR)
    return g.rho * math.sqrt(2.0 * math.pi / a) * math.exp(-0.5 * (q.C - q.B * q.B / a))


def _rays_of(r: Ray) -> Rays:
    return Rays.from_rays([r])


def integrate_ray(cloud: GaussianCloud, r: Ray, candidates: Optional[Sequence[int]] = None) -> float:
    """Sum of the closed-form integrals over ``candidates`` (default: all Gaussians)."""
    idx = _candidate_array(cloud, candidates)
    if not len(idx):
        return 0.0
    mu, P, rho = pack(cloud)
    o, d = r.origin, r.direction
    total = 0.0
    for g in idx:
        total += _pair_value(o, d, mu[g], P[g], rho[g])
    return float(total)


def integrate_ray_grad(cloud: GaussianCloud, r: Ray, upstream: float = 1.0,
                       candidates: Optional[Sequence[int]] = None) -> RayGradients:
    """Gradient of ``upstream * integrate_ray(cloud, r, candidates)``."""
    m = len(cloud)
    idx = _candidate_array(cloud, candidates)
    acc = np.zeros((m, 10))
    if len(idx):
        mu, P, rho = pack(cloud)
        _pair_backward_into(r.origin, r.direction, float(upstream), idx, mu, P, rho, acc)
    return finish_gradients(cloud, acc)


def _candidate_array(cloud, candidates) -> np.ndarray:
    if candidates is None:
        return np.arange(len(cloud))
    idx = np.asarray(candidates, dtype=np.int64).reshape(-1)
    if len(idx) and (idx.min() < 0 or idx.max() >= len(cloud)):
        raise IndexError("candidate index out of range")
    return idx


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------


def pack(cloud: GaussianCloud):
    """Positions, packed inverse covariances (xx yy zz xy xz yz) and densities."""
    Pm = cloud.inverse_covariances()
    P = np.stack([Pm[:, 0, 0], Pm[:, 1, 1], Pm[:, 2, 2], Pm[:, 0, 1], Pm[:, 0, 2], Pm[:, 1, 2]], axis=1)
    return np.ascontiguousarray(cloud.mu), np.ascontiguousarray(P), np.ascontiguousarray(cloud.rho)


@numba.njit(cache=True, inline="always")
def _abc(o, d, mu, P):
    # origin slid along d to the Euclidean closest point to mu
    dx = o[0] - mu[0]
    dy = o[1] - mu[1]
    dz = o[2] - mu[2]
    t0 = -(dx * d[0] + dy * d[1] + dz * d[2])
    dx += t0 * d[0]
    dy += t0 * d[1]
    dz += t0 * d[2]
    pdx = P[0] * d[0] + P[3] * d[1] + P[4] * d[2]
    pdy = P[3] * d[0] + P[1] * d[1] + P[5] * d[2]
    pdz = P[4] * d[0] + P[5] * d[1] + P[2] * d[2]
    A = d[0] * pdx + d[1] * pdy + d[2] * pdz
    B = dx * pdx + dy * pdy + dz * pdz
    pex = P[0] * dx + P[3] * dy + P[4] * dz
    pey = P[3] * dx + P[1] * dy + P[5] * dz
    pez = P[4] * dx + P[5] * dy + P[2] * dz
    C = dx * pex + dy * pey + dz * pez
    if A < A_FLOOR:
        A = A_FLOOR
    return A, B, C, dx, dy, dz, pdx, pdy, pdz, pex, pey, pez


@numba.njit(cache=True)
def _pair_value(o, d, mu, P, rho):
    A, B, C, _, _, _, _, _, _, _, _, _ = _abc(o, d, mu, P)
    q = 0.5 * (C - B * B / A)
    if q > EXP_CUTOFF:
        return 0.0
    return rho * math.sqrt(2.0 * math.pi / A) * math.exp(-q)


@numba.njit(cache=True, inline="always")
def _accumulate_pair(o, d, u, g, mu, P, rho, acc):
    A, B, C, ex, ey, ez, pdx, pdy, pdz, pex, pey, pez = _abc(o, d, mu[g], P[g])
    q = 0.5 * (C - B * B / A)
    if q > EXP_CUTOFF:
        return
    base = math.sqrt(2.0 * math.pi / A) * math.exp(-q)
    acc[g, 0] += u * base
    val = u * rho[g] * base
    if val == 0.0:
        return
    k = B / A
    # dI/dmu = I * P (delta - (B/A) d)
    acc[g, 1] += val * (pex - k * pdx)
    acc[g, 2] += val * (pey - k * pdy)
    acc[g, 3] += val * (pez - k * pdz)
    ia = val * (-0.5 / A - 0.5 * k * k)
    ib = val * k
    ic = -0.5 * val
    # dI/dP = ia d d' + ib sym(d delta') + ic delta delta'
    acc[g, 4] += ia * d[0] * d[0] + ib * d[0] * ex + ic * ex * ex
    acc[g, 5] += ia * d[1] * d[1] + ib * d[1] * ey + ic * ey * ey
    acc[g, 6] += ia * d[2] * d[2] + ib * d[2] * ez + ic * ez * ez
    acc[g, 7] += ia * d[0] * d[1] + 0.5 * ib * (d[0] * ey + d[1] * ex) + ic * ex * ey
    acc[g, 8] += ia * d[0] * d[2] + 0.5 * ib * (d[0] * ez + d[2] * ex) + ic * ex * ez
    acc[g, 9] += ia * d[1] * d[2] + 0.5 * ib * (d[1] * ez + d[2] * ey) + ic * ey * ez


@numba.njit(cache=True)
def _pair_backward_into(o, d, u, idx, mu, P, rho, acc):
    for j in range(idx.shape[0]):
        _accumulate_pair(o, d, u, idx[j], mu, P, rho, acc)


@numba.njit(cache=True, nogil=True)
def _render_range(origins, dirs, tmin, tmax, mu, P, rho, use_bvh,
                  node_lo, node_hi, left, right, start, count, order, prim_lo, prim_hi,
                  out, i0, i1):
    m = mu.shape[0]
    buf = np.empty(m, np.int64)
    if not use_bvh:
        for j in range(m):
            buf[j] = j
    for i in range(i0, i1):
        o = origins[i]
        d = dirs[i]
        n = m
        if use_bvh:
            n = accel.collect_candidates(o, d, tmin[i], tmax[i], node_lo, node_hi, left, right,
                                         start, count, order, prim_lo, prim_hi, buf)
        s = 0.0
        for j in range(n):
            g = buf[j]
            A, B, C, _, _, _, _, _, _, _, _, _ = _abc(o, d, mu[g], P[g])
            q = 0.5 * (C - B * B / A)
            if q < EXP_CUTOFF:
                s += rho[g] * math.sqrt(2.0 * math.pi / A) * math.exp(-q)
        out[i] = s


@numba.njit(cache=True, nogil=True)
def _backward_range(origins, dirs, tmin, tmax, upstream, mu, P, rho, use_bvh,
                    node_lo, node_hi, left, right, start, count, order, prim_lo, prim_hi,
                    acc, i0, i1, rho_only):
    m = mu.shape[0]
    buf = np.empty(m, np.int64)
    if not use_bvh:
        for j in range(m):
            buf[j] = j
    for i in range(i0, i1):
        u = upstream[i]
        if u == 0.0:
            continue
        o = origins[i]
        d = dirs[i]
        n = m
        if use_bvh:
            n = accel.collect_candidates(o, d, tmin[i], tmax[i], node_lo, node_hi, left, right,
                                         start, count, order, prim_lo, prim_hi, buf)
        if rho_only:
            for j in range(n):
                g = buf[j]
                A, B, C, _, _, _, _, _, _, _, _, _ = _abc(o, d, mu[g], P[g])
                q = 0.5 * (C - B * B / A)
                if q < EXP_CUTOFF:
                    acc[g, 0] += u * math.sqrt(2.0 * math.pi / A) * math.exp(-q)
        else:
            for j in range(n):
                _accumulate_pair(o, d, u, buf[j], mu, P, rho, acc)


_EMPTY_BVH = (np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, np.int64),
              np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64),
              np.zeros((0, 3)), np.zeros((0, 3)))


def _chunks(n: int, workers: int):
    workers = max(1, min(int(workers), n)) if n else 1
    edges = np.linspace(0, n, workers + 1).astype(np.int64)
    return list(zip(edges[:-1], edges[1:]))


def _ray_arrays(rays: Rays):
    flat = rays.flat()
    return (np.ascontiguousarray(flat.origins), np.ascontiguousarray(flat.directions),
            np.ascontiguousarray(flat.t_min), np.ascontiguousarray(flat.t_max))


def render(cloud: GaussianCloud, rays: Rays, bvh: Optional[accel.Bvh] = None, workers: int = 1,
           packed=None) -> np.ndarray:
    """Line integral of the whole cloud along every ray (float64, ``rays.shape``).

    With a BVH only the culled candidates contribute; without one every
    Gaussian is summed. Each ray is independent, so the result does not depend
    on ``workers``.
    """
    o, d, t0, t1 = _ray_arrays(rays)
    out = np.zeros(len(o))
    if not len(cloud) or not len(o):
        return out.reshape(rays.shape)
    if bvh is not None:
        bvh.check_fresh(cloud)
    mu, P, rho = packed if packed is not None else pack(cloud)
    tree = bvh.arrays() if bvh is not None else _EMPTY_BVH
    jobs = _chunks(len(o), workers)
    run = lambda c: _render_range(o, d, t0, t1, mu, P, rho, bvh is not None, *tree, out, c[0], c[1])
    if len(jobs) == 1:
        run(jobs[0])
    else:
        with ThreadPoolExecutor(len(jobs)) as ex:
            list(ex.map(run, jobs))
    return out.reshape(rays.shape)


def backproject(cloud: GaussianCloud, rays: Rays, upstream: np.ndarray, bvh: Optional[accel.Bvh] = None,
                workers: int = 1, packed=None, rho_only: bool = False) -> RayGradients:
    """Gradient of ``sum(upstream * render(cloud, rays))`` w.r.t. all parameters.

    ``rho_only`` skips everything but ``d_rho`` (the plain backprojection of
    ``upstream`` onto the Gaussian basis); the other fields are then zero.

    Rays are split into ``workers`` contiguous chunks, each accumulating into
    its own buffer; buffers are summed in chunk order, so a fixed worker count
    gives bit-identical results and ``workers=1`` is the reference order.
    """
    o, d, t0, t1 = _ray_arrays(rays)
    u = np.ascontiguousarray(np.asarray(upstream, dtype=float).reshape(-1))
    if len(u) != len(o):
        raise ValueError("upstream must have one value per ray")
    m = len(cloud)
    if not m or not len(o):
        return RayGradients.zeros(m)
    if bvh is not None:
        bvh.check_fresh(cloud)
    mu, P, rho = packed if packed is not None else pack(cloud)
    tree = bvh.arrays() if bvh is not None else _EMPTY_BVH
    jobs = _chunks(len(o), workers)
    bufs = [np.zeros((m, 10)) for _ in jobs]

    def run(k):
        i0, i1 = jobs[k]
        _backward_range(o, d, t0, t1, u, mu, P, rho, bvh is not None, *tree, bufs[k], i0, i1, rho_only)

    if len(jobs) == 1:
        run(0)
    else:
        with ThreadPoolExecutor(len(jobs)) as ex:
            list(ex.map(run, range(len(jobs))))
    acc = bufs[0]
    for b in bufs[1:]:
        acc += b
    if rho_only:
        out = RayGradients.zeros(m)
        out.d_rho = acc[:, 0].copy()
        return out
    return finish_gradients(cloud, acc)


# derivative of the rotation matrix w.r.t. (w, x, y, z), as functions of q
def _drot_dq(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q.T
    zero = np.zeros_like(w)
    D = np.empty((len(q), 4, 3, 3))
    D[:, 0] = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1).reshape(-1, 3, 3)
    D[:, 1] = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1).reshape(-1, 3, 3)
    D[:, 2] = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1).reshape(-1, 3, 3)
    D[:, 3] = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1).reshape(-1, 3, 3)
    return 2.0 * D


def finish_gradients(cloud: GaussianCloud, acc: np.ndarray) -> RayGradients:
    """Chain the accumulated dI/dP to log-scale and (tangent) quaternion gradients."""
    m = len(cloud)
    if not m:
        return RayGradients.zeros(0)
    G = np.empty((m, 3, 3))
    G[:, 0, 0], G[:, 1, 1], G[:, 2, 2] = acc[:, 4], acc[:, 5], acc[:, 6]
    G[:, 0, 1] = G[:, 1, 0] = acc[:, 7]
    G[:, 0, 2] = G[:, 2, 0] = acc[:, 8]
    G[:, 1, 2] = G[:, 2, 1] = acc[:, 9]
    q = cloud.rotation / np.linalg.norm(cloud.rotation, axis=1, keepdims=True)
    R = cloud.rotation_matrices()
    inv_s2 = np.exp(-2.0 * cloud.log_scale)
    # P = sum_j s_j^-2 r_j r_j'  ->  dI/dlog s_j = -2 s_j^-2 r_j' G r_j
    d_log_scale = -2.0 * inv_s2 * np.einsum("mij,mik,mkj->mj", R, G, R)
    # P = R D R'  ->  dI/dR = 2 G R D
    dR = 2.0 * np.einsum("mik,mkj->mij", G, R) * inv_s2[:, None, :]
    d_q = np.einsum("mij,mqij->mq", dR, _drot_dq(q))
    d_q -= np.sum(d_q * q, axis=1, keepdims=True) * q
    d_q /= np.linalg.norm(cloud.rotation, axis=1, keepdims=True)
    return RayGradients(acc[:, 0].copy(), acc[:, 1:4].copy(), d_log_scale, d_q)


def forward_project(cloud: GaussianCloud, geometry, view: int, bvh: Optional[accel.Bvh] = None,
                    workers: int = 1, k_sigma: float = accel.DEFAULT_K_SIGMA) -> np.ndarray:
    """Render one view of ``geometry`` as a float32 2D array.

    A BVH is built on the fly when none is given.
    """
    from .geometry import view_rays

    rays = view_rays(geometry, view)
    if bvh is None and len(cloud):
        bvh = accel.build(cloud, k_sigma)
    return render(cloud, rays, bvh, workers).astype(np.float32)

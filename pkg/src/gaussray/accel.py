"""Bounding-volume hierarchy over Gaussian support boxes.

Each primitive is bounded by the axis-aligned box of its ``k_sigma`` ellipsoid.
The tree is a median split over the longest axis with up to ``LEAF_SIZE``
primitives per leaf. Nodes are stored in pre-order, so every child index is
larger than its parent's and a reverse sweep refits the tree bottom-up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import StaleBvh
from .model import Gaussian, GaussianCloud, Ray, Rays

DEFAULT_K_SIGMA = 3.5
LEAF_SIZE = 4
MAX_STACK = 128


def gaussian_aabb(g: Gaussian, k_sigma: float = DEFAULT_K_SIGMA) -> np.ndarray:
    """Box (xmin, ymin, zmin, xmax, ymax, zmax) enclosing the k-sigma ellipsoid.

    The half-extent along axis j is ``k_sigma * sqrt(Sigma_jj)``, the exact
    support of the ellipsoid in that direction.
    """
    if k_sigma <= 0:
        raise ValueError("k_sigma must be positive")
    R = g.rotation_matrix
    half = k_sigma * np.sqrt((R * R) @ np.exp(2 * g.log_scale))
    return np.concatenate([g.mu - half, g.mu + half])


def cloud_aabbs(cloud: GaussianCloud, k_sigma: float) -> tuple[np.ndarray, np.ndarray]:
    if not len(cloud):
        return np.zeros((0, 3)), np.zeros((0, 3))
    R = cloud.rotation_matrices()
    half = k_sigma * np.sqrt(np.einsum("mij,mj->mi", R * R, np.exp(2 * cloud.log_scale)))
    return cloud.mu - half, cloud.mu + half


@numba.njit(cache=True)
def _build(lo, hi, leaf_size):
    m = lo.shape[0]
    cap = 2 * m + 1  # median halves never drop below two primitives
    node_lo = np.empty((cap, 3))
    node_hi = np.empty((cap, 3))
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    count = np.zeros(cap, np.int64)
    order = np.arange(m)
    centroid = 0.5 * (lo + hi)
    if m == 0:
        return node_lo[:0], node_hi[:0], left[:0], right[:0], start[:0], count[:0], order

    # stack of (node, begin, end); children are allocated when a node is split
    stack = np.empty((cap, 3), np.int64)
    sp = 0
    n_nodes = 1
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = m
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        b = stack[sp, 1]
        e = stack[sp, 2]
        for a in range(3):
            node_lo[node, a] = np.inf
            node_hi[node, a] = -np.inf
        for i in range(b, e):
            p = order[i]
            for a in range(3):
                node_lo[node, a] = min(node_lo[node, a], lo[p, a])
                node_hi[node, a] = max(node_hi[node, a], hi[p, a])
        if e - b <= leaf_size:
            start[node] = b
            count[node] = e - b
            continue
        # longest axis of the centroid spread
        best = 0
        best_ext = -1.0
        for a in range(3):
            cmin = np.inf
            cmax = -np.inf
            for i in range(b, e):
                c = centroid[order[i], a]
                cmin = min(cmin, c)
                cmax = max(cmax, c)
            if cmax - cmin > best_ext:
                best_ext = cmax - cmin
                best = a
        keys = np.empty(e - b)
        for i in range(b, e):
            keys[i - b] = centroid[order[i], best]
        srt = np.argsort(keys, kind="mergesort")
        seg = order[b:e].copy()
        for i in range(e - b):
            order[b + i] = seg[srt[i]]
        mid = b + (e - b) // 2
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        # push right first so the left subtree is laid out first
        stack[sp, 0] = rc
        stack[sp, 1] = mid
        stack[sp, 2] = e
        sp += 1
        stack[sp, 0] = lc
        stack[sp, 1] = b
        stack[sp, 2] = mid
        sp += 1
    return (node_lo[:n_nodes], node_hi[:n_nodes], left[:n_nodes], right[:n_nodes],
            start[:n_nodes], count[:n_nodes], order)


@numba.njit(cache=True)
def _refit(node_lo, node_hi, left, right, start, count, order, lo, hi):
    for node in range(node_lo.shape[0] - 1, -1, -1):
        if left[node] < 0:
            for a in range(3):
                node_lo[node, a] = np.inf
                node_hi[node, a] = -np.inf
            for i in range(start[node], start[node] + count[node]):
                p = order[i]
                for a in range(3):
                    node_lo[node, a] = min(node_lo[node, a], lo[p, a])
                    node_hi[node, a] = max(node_hi[node, a], hi[p, a])
        else:
            l = left[node]
            r = right[node]
            for a in range(3):
                node_lo[node, a] = min(node_lo[l, a], node_lo[r, a])
                node_hi[node, a] = max(node_hi[l, a], node_hi[r, a])


@numba.njit(cache=True, inline="always")
def slab_hit(o, d, t0, t1, lo, hi):
    """Slab test of the ray segment [t0, t1] against the box [lo, hi]."""
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return False
        else:
            inv = 1.0 / d[a]
            ta = (lo[a] - o[a]) * inv
            tb = (hi[a] - o[a]) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 > t1:
                return False
    return True


@numba.njit(cache=True, nogil=True)
def collect_candidates(o, d, t0, t1, node_lo, node_hi, left, right, start, count, order,
                       prim_lo, prim_hi, out):
    """Write indices of primitives whose box the ray hits into ``out``; return how many."""
    n = 0
    if node_lo.shape[0] == 0:
        return 0
    stack = np.empty(MAX_STACK, np.int64)
    sp = 0
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not slab_hit(o, d, t0, t1, node_lo[node], node_hi[node]):
            continue
        if left[node] < 0:
            for i in range(start[node], start[node] + count[node]):
                p = order[i]
                if slab_hit(o, d, t0, t1, prim_lo[p], prim_hi[p]):
                    out[n] = p
                    n += 1
        else:
            stack[sp] = right[node]
            sp += 1
            stack[sp] = left[node]
            sp += 1
    return n


@dataclass
class Bvh:
    """Flattened median-split BVH.

    ``order`` is a permutation of primitive indices; leaf ``n`` owns
    ``order[start[n]:start[n] + count[n]]``. ``left[n] == -1`` marks a leaf.
    """

    node_lo: np.ndarray
    node_hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    prim_lo: np.ndarray
    prim_hi: np.ndarray
    k_sigma: float
    n_primitives: int

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def depth(self) -> int:
        if not self.n_nodes:
            return 0
        best, stack = 0, [(0, 1)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.left[node] >= 0:
                stack += [(self.left[node], d + 1), (self.right[node], d + 1)]
        return best

    def leaves(self):
        return np.flatnonzero(self.left < 0)

    def check_fresh(self, cloud: GaussianCloud) -> None:
        if len(cloud) != self.n_primitives:
            raise StaleBvh(f"BVH built for {self.n_primitives} Gaussians, cloud has {len(cloud)}")

    def refit(self, cloud: GaussianCloud) -> None:
        """Update boxes after parameters moved; the topology is kept."""
        self.check_fresh(cloud)
        self.prim_lo, self.prim_hi = cloud_aabbs(cloud, self.k_sigma)
        _refit(self.node_lo, self.node_hi, self.left, self.right, self.start, self.count,
               self.order, self.prim_lo, self.prim_hi)

    def arrays(self):
        return (self.node_lo, self.node_hi, self.left, self.right, self.start, self.count,
                self.order, self.prim_lo, self.prim_hi)


def build(cloud: GaussianCloud, k_sigma: float = DEFAULT_K_SIGMA, leaf_size: int = LEAF_SIZE) -> Bvh:
    if k_sigma <= 0:
        raise ValueError("k_sigma must be positive")
    lo, hi = cloud_aabbs(cloud, k_sigma)
    parts = _build(np.ascontiguousarray(lo), np.ascontiguousarray(hi), leaf_size)
    return Bvh(*parts, prim_lo=lo, prim_hi=hi, k_sigma=float(k_sigma), n_primitives=len(cloud))


def candidates(bvh: Bvh, r: Ray, cloud: GaussianCloud | None = None) -> np.ndarray:
    """Indices of Gaussians whose support box the ray crosses, in traversal order.

    Passing ``cloud`` enables the staleness check.
    """
    if cloud is not None:
        bvh.check_fresh(cloud)
    t0, t1 = r.t_range if r.t_range is not None else (-np.inf, np.inf)
    out = np.empty(bvh.n_primitives, np.int64)
    n = collect_candidates(r.origin, r.direction, t0, t1, *bvh.arrays(), out)
    return out[:n].copy()


def candidates_many(bvh: Bvh, rays: Rays) -> list[np.ndarray]:
    flat = rays.flat()
    return [candidates(bvh, flat[i]) for i in range(len(flat))]

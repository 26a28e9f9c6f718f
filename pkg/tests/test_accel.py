import math

import numpy as np
import pytest

from gaussray import accel
from gaussray.errors import StaleBvh
from gaussray.model import Gaussian, GaussianCloud, Ray, Rays
from gaussray.projector import render

from oracles import covariance, random_quaternion


def random_cloud(rng, m, spread=20.0):
    return GaussianCloud(rng.uniform(-spread, spread, (m, 3)), np.log(rng.uniform(0.5, 3, (m, 3))),
                         rng.normal(size=(m, 4)), rng.uniform(0.1, 1, m))


def test_unit_box():
    np.testing.assert_allclose(accel.gaussian_aabb(Gaussian([0, 0, 0], [0, 0, 0]), 3.0), [-3, -3, -3, 3, 3, 3])


def test_diagonal_box():
    box = accel.gaussian_aabb(Gaussian.from_scale([0, 0, 0], [2, 1, 1]), 3.0)
    np.testing.assert_allclose(box[3:], [6, 3, 3])


def test_box_contains_ellipsoid_samples():
    rng = np.random.default_rng(0)
    q, s = random_quaternion(rng), np.array([4.0, 1.0, 0.3])
    g = Gaussian.from_scale([1, -2, 3], s, q)
    box = accel.gaussian_aabb(g, 3.5)
    L = np.linalg.cholesky(covariance(s, q))
    u = rng.normal(size=(100_000, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    pts = g.mu + 3.5 * u @ L.T
    assert np.all(pts >= box[:3] - 1e-9) and np.all(pts <= box[3:] + 1e-9)


def test_negative_k_rejected():
    with pytest.raises(ValueError):
        accel.gaussian_aabb(Gaussian([0, 0, 0], [0, 0, 0]), 0.0)


def test_empty_tree():
    bvh = accel.build(GaussianCloud())
    assert bvh.n_nodes == 0
    assert len(accel.candidates(bvh, Ray([0, 0, 0], [1, 0, 0]))) == 0


def test_single_leaf():
    g = Gaussian.from_scale([1, 2, 3], [1, 2, 0.5], [0.9, 0.1, 0.2, 0.3])
    bvh = accel.build(GaussianCloud.from_gaussians([g]))
    assert bvh.n_nodes == 1 and bvh.left[0] == -1
    np.testing.assert_allclose(np.concatenate([bvh.node_lo[0], bvh.node_hi[0]]), accel.gaussian_aabb(g))


def audit(bvh, m):
    assert sorted(bvh.order.tolist()) == list(range(m))
    for node in range(bvh.n_nodes):
        lo, hi = bvh.node_lo[node], bvh.node_hi[node]
        if bvh.left[node] < 0:
            prims = bvh.order[bvh.start[node]:bvh.start[node] + bvh.count[node]]
            assert 1 <= len(prims) <= accel.LEAF_SIZE
            assert np.all(bvh.prim_lo[prims] >= lo) and np.all(bvh.prim_hi[prims] <= hi)
        else:
            for child in (bvh.left[node], bvh.right[node]):
                assert child > node
                assert np.all(bvh.node_lo[child] >= lo) and np.all(bvh.node_hi[child] <= hi)


def test_structure_audit_1000():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, 1000)
    bvh = accel.build(cloud)
    audit(bvh, 1000)
    assert bvh.depth() <= math.ceil(math.log2(1000)) + 2


def test_refit_keeps_containment():
    rng = np.random.default_rng(2)
    cloud = random_cloud(rng, 300)
    bvh = accel.build(cloud)
    cloud.mu += rng.normal(size=cloud.mu.shape)
    cloud.log_scale += 0.2
    bvh.refit(cloud)
    lo, hi = accel.cloud_aabbs(cloud, bvh.k_sigma)
    np.testing.assert_array_equal(bvh.prim_lo, lo)
    audit(bvh, 300)


def test_far_ray_is_empty():
    bvh = accel.build(random_cloud(np.random.default_rng(3), 50))
    assert len(accel.candidates(bvh, Ray([0, 500, 0], [1, 0, 0]))) == 0


def test_ray_through_all_means():
    mus = np.array([[x, 0.0, 0.0] for x in range(-20, 21, 2)])
    cloud = GaussianCloud(mus, np.zeros((len(mus), 3)))
    bvh = accel.build(cloud)
    assert sorted(accel.candidates(bvh, Ray([-100, 0, 0], [1, 0, 0]))) == list(range(len(mus)))


def test_candidates_superset_of_significant():
    rng = np.random.default_rng(4)
    k = 3.5
    for _ in range(5):
        cloud = random_cloud(rng, 200)
        bvh = accel.build(cloud, k)
        P = cloud.inverse_covariances()
        for _ in range(40):
            o, d = rng.uniform(-25, 25, 3), rng.normal(size=3)
            d /= np.linalg.norm(d)
            got = set(accel.candidates(bvh, Ray(o, d)).tolist())
            for g in range(len(cloud)):
                delta = o - cloud.mu[g]
                A, B, C = d @ P[g] @ d, d @ P[g] @ delta, delta @ P[g] @ delta
                if C - B * B / A < k * k:
                    assert g in got


def test_t_range_skips_boxes():
    cloud = GaussianCloud([[0, 0, 0], [50, 0, 0]], np.zeros((2, 3)))
    bvh = accel.build(cloud)
    assert accel.candidates(bvh, Ray([-10, 0, 0], [1, 0, 0], (0.0, 20.0))).tolist() == [0]


def test_stale_tree_detected():
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng, 20)
    bvh = accel.build(cloud)
    with pytest.raises(StaleBvh):
        accel.candidates(bvh, Ray([0, 0, 0], [1, 0, 0]), cloud.subset(np.arange(19)))
    with pytest.raises(StaleBvh):
        render(cloud.subset(np.arange(19)), Rays.unbounded([[0, 0, 0]], [[1, 0, 0]]), bvh)


def test_candidates_deterministic():
    rng = np.random.default_rng(6)
    cloud = random_cloud(rng, 100)
    r = Ray([0, 0, -40], [0.1, 0.2, 1])
    a = accel.candidates(accel.build(cloud), r)
    b = accel.candidates(accel.build(cloud), r)
    np.testing.assert_array_equal(a, b)


def test_culling_error_within_tail_bound():
    rng = np.random.default_rng(7)
    k = 3.5
    cloud = random_cloud(rng, 500, spread=50)
    bvh = accel.build(cloud, k)
    d = rng.normal(size=(500, 3))
    o = rng.uniform(-50, 50, (500, 3)) - 150 * d / np.linalg.norm(d, axis=1, keepdims=True)
    rays = Rays.unbounded(o, d)
    err = np.abs(render(cloud, rays, bvh) - render(cloud, rays))
    P = cloud.inverse_covariances()
    a_min = min(float(np.linalg.eigvalsh(p)[0]) for p in P)
    bound = len(cloud) * cloud.rho.max() * math.sqrt(2 * math.pi / a_min) * math.exp(-k * k / 2)
    assert err.max() <= bound

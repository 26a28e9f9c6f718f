import math

import numpy as np
import pytest

from gaussray import geometry, projector
from gaussray.errors import ConfigError, ShapeMismatch, StateMismatch
from gaussray.model import GaussianCloud, Rays
from gaussray.optim import (AdamState, TrainConfig, adam_step, densify_and_prune, initialize, lattice_positions,
                            projection_loss, reconstruct, ssim2d)
from gaussray.phantom import ProjectionSet, build_nema, simulate
from gaussray.projector import RayGradients, render

from oracles import brute_ssim2d


def grads_like(cloud, fill=0.0):
    m = len(cloud)
    return RayGradients(np.full(m, fill), np.full((m, 3), fill), np.full((m, 3), fill), np.full((m, 4), fill))


# loss

def test_identical_images_zero_loss():
    x = np.random.default_rng(0).uniform(size=(8, 9))
    loss, g = projection_loss(x, x)
    assert loss == pytest.approx(0.0, abs=1e-15)
    assert np.abs(g).max() < 1e-15


def test_pure_l1_constant_offset():
    m = np.random.default_rng(1).uniform(size=(6, 6))
    loss, _ = projection_loss(m + 0.3, m, lam=0.0)
    assert loss == pytest.approx(0.3)


def test_ssim_matches_direct_summation():
    rng = np.random.default_rng(2)
    for shape in [(8, 8), (13, 17)]:
        x, y = rng.uniform(size=shape), rng.uniform(size=shape)
        assert ssim2d(x, y) == pytest.approx(brute_ssim2d(x, y, y.max()), abs=1e-6)


def test_loss_gradient_finite_differences():
    rng = np.random.default_rng(3)
    r, m = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
    _, g = projection_loss(r, m)
    h = 1e-6
    fd = np.zeros_like(r)
    for idx in np.ndindex(r.shape):
        e = np.zeros_like(r)
        e[idx] = h
        fd[idx] = (projection_loss(r + e, m)[0] - projection_loss(r - e, m)[0]) / (2 * h)
    assert np.abs(g - fd).max() <= 1e-4 * np.abs(fd).max()


def test_l2_loss_and_shape_check():
    loss, g = projection_loss(np.ones((2, 2)), np.zeros((2, 2)), kind="l2")
    assert loss == 1.0 and np.all(g == 0.5)
    with pytest.raises(ShapeMismatch):
        projection_loss(np.ones((2, 2)), np.ones((2, 3)))


# Adam

def small_cloud(m=3):
    rng = np.random.default_rng(4)
    return GaussianCloud(rng.normal(size=(m, 3)), np.zeros((m, 3)), None, np.ones(m))


def test_zero_gradient_leaves_cloud():
    c = small_cloud()
    before = c.copy()
    adam_step(c, grads_like(c), AdamState.zeros(c), TrainConfig(lr_mu=0.1))
    assert c.checksum() == before.checksum()


def test_first_step_is_signed_learning_rate():
    c = small_cloud(1)
    mu0 = c.mu.copy()
    g = grads_like(c)
    g.d_mu[:] = [3.0, -0.02, 0.0]
    adam_step(c, g, AdamState.zeros(c), TrainConfig(lr_mu=0.1))
    np.testing.assert_allclose(c.mu - mu0, [[-0.1, 0.1, 0.0]], rtol=1e-9)


def test_groups_use_their_rates():
    c = small_cloud(2)
    mu0, s0, r0 = c.mu.copy(), c.log_scale.copy(), c.rho.copy()
    g = grads_like(c, 1.0)
    g.d_rotation[:] = 0.0
    cfg = TrainConfig(lr_mu=0.1, lr_log_scale=0.02, lr_rho=0.3)
    adam_step(c, g, AdamState.zeros(c), cfg)
    np.testing.assert_allclose(mu0 - c.mu, 0.1)
    np.testing.assert_allclose(s0 - c.log_scale, 0.02)
    np.testing.assert_allclose(r0 - c.rho, 0.3)


def test_state_mismatch():
    c = small_cloud(3)
    with pytest.raises(StateMismatch):
        adam_step(c, grads_like(c), AdamState.zeros(small_cloud(2)), TrainConfig())


def test_constraints_after_step():
    c = small_cloud(2)
    g = grads_like(c)
    g.d_rho[:] = 1.0
    g.d_log_scale[:] = -1.0
    adam_step(c, g, AdamState.zeros(c), TrainConfig(lr_rho=5.0, lr_log_scale=100.0, scale_max=10.0))
    assert np.all(c.rho == 0.0)
    np.testing.assert_allclose(c.scale, 10.0)
    np.testing.assert_allclose(np.linalg.norm(c.rotation, axis=1), 1.0)


# densify and prune

def test_quiet_cloud_unchanged():
    c = small_cloud(4)
    out = densify_and_prune(c, np.zeros(4), TrainConfig(prune_rho=0.5))
    assert out.checksum() == c.checksum()


def test_split_large_gaussian():
    c = GaussianCloud([[1.0, 2.0, 3.0]], np.log([[6.0, 2.0, 1.0]]), None, [1.0])
    out = densify_and_prune(c, [1.0], TrainConfig(densify_split_scale=3.0, prune_rho=0.1))
    assert len(out) == 2
    np.testing.assert_allclose(out.mu.mean(axis=0), [1, 2, 3])
    np.testing.assert_allclose(np.sort(out.mu[:, 0]), [1 - 3.0, 1 + 3.0])
    np.testing.assert_allclose(out.scale, [[6 / 1.6, 2 / 1.6, 1 / 1.6]] * 2)
    assert np.all(out.rho == 1.0)


def test_clone_small_gaussian():
    c = GaussianCloud([[0.0, 0.0, 0.0]], np.log([[1.0, 1.0, 2.0]]), None, [1.0])
    out = densify_and_prune(c, [1.0], TrainConfig(densify_split_scale=3.0, prune_rho=0.1),
                            grad_dirs=np.array([[0.0, -5.0, 0.0]]))
    assert len(out) == 2
    np.testing.assert_allclose(out.mu[1], [0, 0.1, 0])
    assert out.rho.sum() == pytest.approx(1.0)


def test_densify_stops_late():
    c = GaussianCloud([[0.0, 0.0, 0.0]], np.zeros((1, 3)), None, [1.0])
    cfg = TrainConfig(iterations=100, densify_stop_fraction=0.5)
    assert len(densify_and_prune(c, [1.0], cfg, iteration=60)) == 1
    assert len(densify_and_prune(c, [1.0], cfg, iteration=40)) == 2


def test_prune_mass_bound():
    rng = np.random.default_rng(5)
    tau = 0.05
    m = 60
    rho = np.where(rng.uniform(size=m) < 0.5, rng.uniform(0, tau, m), rng.uniform(0.5, 1, m))
    c = GaussianCloud(rng.uniform(-10, 10, (m, 3)), np.log(rng.uniform(0.5, 2, (m, 3))), rng.normal(size=(m, 4)), rho)
    out = densify_and_prune(c, np.zeros(m), TrainConfig(prune_rho=tau))
    assert len(out) == int(np.sum(rho >= tau))
    d = rng.normal(size=(300, 3))
    rays = Rays.unbounded(rng.uniform(-10, 10, (300, 3)) - 40 * d / np.linalg.norm(d, axis=1, keepdims=True), d)
    change = np.abs(render(c, rays) - render(out, rays))
    a_min = min(float(np.linalg.eigvalsh(p)[0]) for p in c.inverse_covariances())
    assert change.max() <= tau * m * math.sqrt(2 * math.pi / a_min)


# initialization

def test_single_gaussian_centred():
    geom = geometry.ParallelBeam(nu=8, nv=8, bin_spacing=1.0, n_views=2)
    c = initialize(geom, ProjectionSet(geom, np.ones(geom.n_bins)), TrainConfig(init_n_gaussians=1))
    assert len(c) == 1 and np.all(c.mu == 0)


def test_lattice_inside_fov_and_seeded():
    pts = lattice_positions(3000, 50.0, 20.0, 7)
    assert len(pts) == 3000
    assert np.all(np.hypot(pts[:, 0], pts[:, 1]) <= 50.0) and np.all(np.abs(pts[:, 2]) <= 20.0)
    np.testing.assert_array_equal(pts, lattice_positions(3000, 50.0, 20.0, 7))
    assert len(np.unique(pts, axis=0)) == 3000


def test_nema_initial_projection_scale():
    geom = geometry.CylindricalPet(n_rings=3, max_ring_difference=1, ring_spacing=4.0, n_radial_bins=111,
                                   n_views=12, arc_corrected=True)
    measured = simulate(build_nema(), geom)
    cloud = initialize(geom, measured, TrainConfig(init_n_gaussians=3000))
    est = render(cloud, geometry.all_rays(geom))
    ratio = est.mean() / measured.data.mean()
    assert 0.1 <= ratio <= 10


# training loop

def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_rho=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(loss_lambda=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(densify_stop_fraction=0.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    assert TrainConfig.from_dict({"iterations": "20", "lr_mu": 1}).lr_mu == 1.0


def single_gaussian_data():
    geom = geometry.ParallelBeam(nu=32, nv=32, bin_spacing=1.0, n_views=30)
    truth = GaussianCloud([[2.0, -1.0, 0.5]], np.log([[3.0, 2.0, 2.5]]), [[0.9, 0.2, 0.1, 0.3]], [1.0])
    data = np.concatenate([projector.forward_project(truth, geom, v).ravel() for v in range(30)])
    return ProjectionSet(geom, data)


SMOKE = dict(iterations=500, batch_views=2, densify_start=10 ** 9, lr_mu=0.05, lr_log_scale=0.01,
             lr_rotation=0.01, lr_rho=0.01, lr_final_factor=0.01)


def test_convergence_smoke():
    init = GaussianCloud([[1.0, 0.0, 0.0]], np.log([[2.5, 2.5, 2.5]]), None, [0.7])
    cloud, report = reconstruct(single_gaussian_data(), TrainConfig(**SMOKE), init)
    assert report.final_loss <= 1e-3 * report.initial_loss
    np.testing.assert_allclose(cloud.mu[0], [2.0, -1.0, 0.5], atol=0.05)
    its = [r["iteration"] for r in report.records]
    assert its == sorted(its) and all(math.isfinite(r["loss"]) for r in report.records)


def test_deterministic_replay():
    init = GaussianCloud([[1.0, 0.0, 0.0]], np.log([[2.5, 2.5, 2.5]]), None, [0.7])
    ms = single_gaussian_data()
    cfg = TrainConfig(**{**SMOKE, "iterations": 40})
    assert reconstruct(ms, cfg, init)[1].checksum == reconstruct(ms, cfg, init)[1].checksum


def test_zero_data_collapses():
    geom = geometry.ParallelBeam(nu=16, nv=16, bin_spacing=1.0, n_views=6)
    rng = np.random.default_rng(6)
    init = GaussianCloud(rng.uniform(-4, 4, (20, 3)), np.zeros((20, 3)), None, np.ones(20))
    cfg = TrainConfig(iterations=120, batch_views=2, lr_mu=0.05, densify_start=50, densify_interval=50)
    cloud, report = reconstruct(ProjectionSet(geom, np.zeros(geom.n_bins)), cfg, init)
    assert len(cloud) == 0 or cloud.rho.max() <= cfg.prune_rho
    assert report.final_loss <= report.initial_loss

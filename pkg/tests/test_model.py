import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaussray.errors import DegenerateRay
from gaussray.model import (Gaussian, GaussianCloud, Ray, Rays, axis_angle_quaternion, covariance,
                            inverse_covariance, load_cloud, make_ray, save_cloud)

from oracles import covariance as oracle_covariance
from oracles import random_quaternion


def test_identity_covariance():
    np.testing.assert_allclose(covariance(Gaussian([0, 0, 0], [0, 0, 0])), np.eye(3), atol=1e-15)


def test_diagonal_covariance():
    g = Gaussian.from_scale([0, 0, 0], [2, 1, 1])
    np.testing.assert_allclose(covariance(g), np.diag([4.0, 1, 1]), atol=1e-14)
    np.testing.assert_allclose(inverse_covariance(g), np.diag([0.25, 1, 1]), atol=1e-15)


def test_rotated_covariance():
    g = Gaussian.from_scale([0, 0, 0], [2, 1, 1], axis_angle_quaternion([0, 0, 1], np.pi / 2))
    np.testing.assert_allclose(covariance(g), np.diag([1.0, 4, 1]), atol=1e-14)


def test_inverse_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        q = random_quaternion(rng)
        s = np.exp(rng.uniform(-2, 2, 3))
        g = Gaussian.from_scale(rng.normal(size=3), s, q)
        np.testing.assert_allclose(covariance(g) @ inverse_covariance(g), np.eye(3), atol=1e-9)


def test_covariance_matches_independent_assembly():
    rng = np.random.default_rng(1)
    for _ in range(50):
        q, s = random_quaternion(rng), rng.uniform(0.1, 4, 3)
        np.testing.assert_allclose(covariance(Gaussian.from_scale([0, 0, 0], s, q)), oracle_covariance(s, q),
                                   rtol=1e-12, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_spectrum_is_scale_squared(log_scale, q):
    g = Gaussian([0, 0, 0], log_scale, q)
    eig = np.sort(np.linalg.eigvalsh(covariance(g)))
    np.testing.assert_allclose(eig, np.sort(np.exp(2 * np.array(log_scale))), rtol=1e-9)
    assert abs(np.linalg.norm(g.rotation) - 1) < 1e-12


def test_make_ray_examples():
    r = make_ray([0, 0, 0], [0, 2, 0])
    np.testing.assert_allclose(r.direction, [0, 1, 0])
    assert r.t_range == (0.0, 2.0)
    r = make_ray([1, 0, 0], [1, 0, 5])
    np.testing.assert_allclose(r.direction, [0, 0, 1])
    assert r.t_range == (0.0, 5.0)
    with pytest.raises(DegenerateRay):
        make_ray([1, 2, 3], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6))
def test_make_ray_unit_direction(v):
    a, b = np.array(v[:3]), np.array(v[3:])
    if np.linalg.norm(b - a) <= 1e-9:
        with pytest.raises(DegenerateRay):
            make_ray(a, b)
    else:
        assert abs(np.linalg.norm(make_ray(a, b).direction) - 1) < 1e-9


def test_ray_rejects_reversed_range():
    with pytest.raises(ValueError):
        Ray([0, 0, 0], [1, 0, 0], (2.0, 1.0))


def test_rays_batch_round_trip():
    rays = Rays.between(np.zeros((2, 3)), [[1, 0, 0], [0, 3, 0]])
    assert rays.shape == (2,)
    assert rays[1].t_range == (0.0, 3.0)
    assert Rays.unbounded([[0, 0, 0]], [[0, 0, 2]])[0].t_range is None


def test_cloud_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    cloud = GaussianCloud(rng.normal(size=(7, 3)), rng.normal(size=(7, 3)), rng.normal(size=(7, 4)), rng.uniform(size=7))
    path = tmp_path / "c.grtc"
    save_cloud(cloud, path)
    raw = path.read_bytes()
    assert raw[:4] == b"GRTC" and len(raw) == 16 + 7 * 11 * 8
    back = load_cloud(path)
    assert back.checksum() == cloud.checksum()
    save_cloud(back, tmp_path / "again.grtc")
    assert (tmp_path / "again.grtc").read_bytes() == raw


def test_empty_cloud_serializes():
    c = GaussianCloud()
    assert len(GaussianCloud.from_bytes(c.to_bytes())) == 0


def test_project_constraints():
    c = GaussianCloud([[0, 0, 0]], [[-20, 0, 5]], [[2, 0, 0, 0]], [-1.0])
    c.project_constraints(1e-3, 10.0)
    assert c.rho[0] == 0.0
    np.testing.assert_allclose(c.scale[0], [1e-3, 1, 10])
    np.testing.assert_allclose(c.rotation[0], [1, 0, 0, 0])

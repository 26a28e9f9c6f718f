import json
import math

import numpy as np
import pytest

from gaussray.errors import NegativeData
from gaussray.geometry import CylindricalPet, ParallelBeam, view_index
from gaussray.model import Ray, Rays, make_ray
from gaussray.phantom import (AnalyticPhantom, Cylinder, ProjectionSet, Sphere, add_poisson, build_nema,
                              build_point_sources, nema_sphere_centers, parse_spheres, phantom_line_integral,
                              rasterize, simulate)
from gaussray.volume import VolumeGrid


def march(p, origin, direction, t0, t1, n=1_000_000):
    t = (np.arange(n) + 0.5) / n * (t1 - t0) + t0
    d = np.asarray(direction, dtype=float) / np.linalg.norm(direction)
    pts = np.asarray(origin, dtype=float) + t[:, None] * d
    return float(p.activity_at(pts).sum() * (t1 - t0) / n)


def test_sphere_center_chord():
    p = AnalyticPhantom([Sphere([1, 2, 3], 5.0, 2.0)])
    assert phantom_line_integral(p, Ray([1, 2, -20], [0, 0, 1])) == pytest.approx(20.0)


def test_sphere_tangent_is_zero():
    p = AnalyticPhantom([Sphere([0, 0, 0], 5.0, 2.0)])
    assert phantom_line_integral(p, Ray([5, -10, 0], [0, 1, 0])) == 0.0


def test_axial_ray_through_cylinder():
    p = AnalyticPhantom([Cylinder([0, 0, 0], 10.0, 7.0, 3.0)])
    assert phantom_line_integral(p, Ray([2, 1, -50], [0, 0, 1])) == pytest.approx(2 * 7 * 3)


def test_oblique_ray_vs_marching():
    p = build_nema()
    o, d = np.array([-150.0, -40.0, -60.0]), np.array([1.0, 0.35, 0.3])
    d /= np.linalg.norm(d)
    exact = phantom_line_integral(p, Ray(o, d))
    assert exact == pytest.approx(march(p, o, d, 0, 400), rel=1e-4)


def test_additive_over_elements():
    a, b = Sphere([1, 0, 0], 3, 1.0), Cylinder([0, 0, 0], 5, 4, 0.5)
    rays = Rays.unbounded(np.random.default_rng(0).normal(size=(20, 3)) * 3 - [0, 20, 0], [[0.1, 1, 0.05]] * 20)
    both = phantom_line_integral(AnalyticPhantom([a, b]), rays)
    sep = phantom_line_integral(AnalyticPhantom([a]), rays) + phantom_line_integral(AnalyticPhantom([b]), rays)
    np.testing.assert_allclose(both, sep, rtol=1e-14)


def test_rigid_motion_invariance():
    rng = np.random.default_rng(1)
    theta = 0.7
    R = np.array([[math.cos(theta), -math.sin(theta), 0], [math.sin(theta), math.cos(theta), 0], [0, 0, 1]])
    shift = np.array([3.0, -2.0, 5.0])
    p = AnalyticPhantom([Sphere([4, 1, 0], 6, 1.0), Cylinder([0, 0, 1], 8, 10, 0.3)])
    moved = AnalyticPhantom([Sphere(R @ [4, 1, 0] + shift, 6, 1.0), Cylinder(R @ [0, 0, 1] + shift, 8, 10, 0.3)])
    for _ in range(20):
        o, d = rng.normal(size=3) * 4 - [0, 30, 0], rng.normal(size=3) * 0.2 + [0, 1, 0]
        assert phantom_line_integral(moved, Ray(R @ o + shift, R @ d)) == pytest.approx(
            phantom_line_integral(p, Ray(o, d)), rel=1e-9, abs=1e-12)


def test_nema_layout():
    p = build_nema(background_activity=1.5, ratio=4.0)
    centers = nema_sphere_centers()
    np.testing.assert_allclose(np.linalg.norm(centers[:, :2], axis=1), 57.2)
    spheres = [e for e in p.elements if isinstance(e, Sphere)]
    assert [2 * s.radius for s in spheres] == [10, 13, 17, 22, 28, 37]
    inside = p.activity_at(centers)
    assert np.all(inside / 1.5 == 4.0)
    assert p.activity_at(np.array([[0.0, 0.0, 0.0], [10.0, 5.0, -30.0]])).tolist() == [0.0, 0.0]
    assert p.activity_at(np.array([85.0, 0.0, 0.0])) == 1.5


def test_point_sources():
    p = build_point_sources()
    np.testing.assert_array_equal([e.center for e in p.elements], [[0, 10, 0], [0, 100, 0], [0, 200, 0]])
    assert len({e.activity for e in p.elements}) == 1
    assert all(e.radius == 2.0 for e in p.elements)


def test_parse_spheres():
    p = parse_spheres("0,0,0,5,1; 10,0,0,2,3")
    assert len(p.elements) == 2 and p.elements[1].activity == 3
    with pytest.raises(ValueError):
        parse_spheres("1,2,3")


def test_simulate_empty_and_symmetric():
    g = ParallelBeam(nu=11, nv=5, bin_spacing=1.0, n_views=8)
    assert not simulate(AnalyticPhantom(), g).data.any()
    ps = simulate(AnalyticPhantom([Sphere([0, 0, 0], 4.3, 1.0)]), g)
    views = np.stack([ps.view(v) for v in range(8)])
    assert np.abs(views - views[0]).max() <= 1e-12 * views.max()


def test_nema_sinogram_dip():
    g = CylindricalPet(n_radial_bins=101, n_views=4, arc_corrected=True)
    ps = simulate(build_nema(), g)
    row = ps.data[view_index(g, 1)][0]
    s = (np.arange(101) - 50) * g.arc_spacing
    # chord-length oracle: background cylinder minus the empty insert
    expected = 2 * np.sqrt(np.maximum(110 ** 2 - s ** 2, 0)) - 2 * np.sqrt(np.maximum(25 ** 2 - s ** 2, 0))
    hits_sphere = np.zeros(101, bool)
    phi = g.angle(1)
    for c, dia in zip(nema_sphere_centers(), [10, 13, 17, 22, 28, 37]):
        sc = c[0] * math.cos(phi) + c[1] * math.sin(phi)
        hits_sphere |= np.abs(s - sc) < dia / 2
    np.testing.assert_allclose(row[~hits_sphere], expected[~hits_sphere], rtol=1e-9, atol=1e-9)


def test_poisson_statistics():
    g = ParallelBeam(nu=6, nv=1, bin_spacing=4.0, n_views=2)
    ps = simulate(AnalyticPhantom([Sphere([0, 0, 0], 10, 1.0)]), g)
    samples = np.stack([add_poisson(ps, 1e4, s).data for s in range(100)])
    scale = 1e4 / ps.data.sum()
    sigma = np.sqrt(ps.data * scale) / scale / 10
    assert np.all(np.abs(samples.mean(0) - ps.data) <= 5 * sigma + 1e-12)
    assert np.all(samples[:, ps.data == 0] == 0)
    a, b = add_poisson(ps, 5e6, 7), add_poisson(ps, 5e6, 7)
    assert a.data.tobytes() == b.data.tobytes() and a.counts_scale == pytest.approx(5e6 / ps.data.sum())


def test_poisson_rejects_negative():
    g = ParallelBeam(nu=2, nv=1, bin_spacing=1.0, n_views=1)
    with pytest.raises(NegativeData):
        add_poisson(ProjectionSet(g, [1.0, -1.0]), 10, 0)


def test_rasterize_values_and_total():
    p = build_nema()
    grid = VolumeGrid.centered((222, 222, 182), 1.0)
    vol = rasterize(p, grid)
    assert vol.data.sum() == pytest.approx(p.total_activity(), rel=0.01)
    small = VolumeGrid.centered((5, 5, 5), 1.0, center=nema_sphere_centers()[5])
    assert rasterize(p, small).data[2, 2, 2] == 4.0
    hollow = VolumeGrid.centered((3, 3, 3), 1.0)
    assert not rasterize(p, hollow, supersample=2).data.any()


def test_projection_file_round_trip(tmp_path):
    g = CylindricalPet(n_rings=2, max_ring_difference=1, n_radial_bins=9, n_views=3)
    ps = add_poisson(simulate(build_nema(), g), 1e5, 3)
    ps.save(tmp_path / "s.sino")
    meta = json.loads((tmp_path / "s.sino.json").read_text())
    assert meta["seed"] == 3 and meta["geometry"]["geometry"] == "pet"
    back = ProjectionSet.load(tmp_path / "s.sino")
    back.save(tmp_path / "t.sino")
    assert (tmp_path / "t.sino").read_bytes() == (tmp_path / "s.sino").read_bytes()
    assert (tmp_path / "t.sino.json").read_text() == (tmp_path / "s.sino.json").read_text()

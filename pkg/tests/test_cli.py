import csv
import json

import numpy as np
import pytest

from gaussray.cli import main
from gaussray.phantom import ProjectionSet
from gaussray.volume import VolumeGrid

PARALLEL = """\
# small parallel-beam scanner
geometry = parallel
detector_nu = 16
detector_nv = 16
bin_spacing_mm = 1.0
n_views = 6
"""

PET = """\
geometry = pet
n_rings = 3
max_ring_difference = 1
n_radial_bins = 31
n_views = 8
arc_corrected = true
"""

TRAIN = """\
iterations = 30
batch_views = 2
init_n_gaussians = 60
densify_start = 10
densify_interval = 10
log_interval = 10
"""

BALL = "spheres:0,0,0,5,1"


@pytest.fixture
def work(tmp_path):
    (tmp_path / "par.cfg").write_text(PARALLEL)
    (tmp_path / "pet.cfg").write_text(PET)
    (tmp_path / "train.cfg").write_text(TRAIN)
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


def test_simulate_with_noise_is_reproducible(work):
    for name in ("a", "b"):
        assert run("simulate", "--geom", work / "pet.cfg", "--phantom", "nema", "--counts", "5e6", "--seed", 1,
                   "-o", work / f"{name}.sino") == 0
    assert (work / "a.sino").read_bytes() == (work / "b.sino").read_bytes()
    assert (work / "a.sino.json").read_text() == (work / "b.sino.json").read_text()
    manifest = json.loads((work / "a.sino.manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 1 and len(manifest["config_sha256"]) == 64
    ps = ProjectionSet.load(work / "a.sino")
    counts = ps.data.astype(float) * ps.counts_scale
    assert ps.data.sum() > 0 and np.allclose(counts, np.round(counts), atol=1e-3)


def test_missing_or_bad_config_exits_2(work, capsys):
    assert run("simulate", "--geom", work / "nope.cfg", "--phantom", "nema", "-o", work / "x.sino") == 2
    assert "nope.cfg" in capsys.readouterr().err
    (work / "bad.cfg").write_text("geometry = fan\n")
    assert run("simulate", "--geom", work / "bad.cfg", "--phantom", "nema", "-o", work / "x.sino") == 2
    assert run("simulate", "--geom", work / "pet.cfg", "--phantom", "cube", "-o", work / "x.sino") == 2
    assert not (work / "x.sino").exists()


def test_corrupt_sidecar_exits_2_and_missing_file_3(work):
    assert run("simulate", "--geom", work / "par.cfg", "--phantom", BALL, "-o", work / "s.sino") == 0
    (work / "s.sino.json").write_text("{not json")
    assert run("reconstruct", work / "s.sino", "-o", work / "c.grtc") == 2
    assert run("reconstruct", work / "missing.sino", "-o", work / "c.grtc") == 3
    assert run("voxelize", work / "missing.grtc", "--dims", 8, "-o", work / "v.vol") == 3


def test_reconstruct_voxelize_evaluate(work):
    assert run("simulate", "--geom", work / "par.cfg", "--phantom", BALL, "-o", work / "s.sino") == 0
    for name in ("c1", "c2"):
        assert run("reconstruct", work / "s.sino", "--config", work / "train.cfg", "--deterministic",
                   "--seed", 3, "-o", work / f"{name}.grtc") == 0
    assert (work / "c1.grtc").read_bytes() == (work / "c2.grtc").read_bytes()
    log = [json.loads(line) for line in (work / "c1.grtc.log.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in log[:-1]] == [10, 20, 30]
    assert log[-1]["final_loss"] <= log[-1]["initial_loss"]

    assert run("voxelize", work / "c1.grtc", "--dims", 16, "--spacing", 1, "-o", work / "v.vol") == 0
    vol = VolumeGrid.load(work / "v.vol")
    assert vol.dims == (16, 16, 16) and vol.data.max() > 0
    sidecar = json.loads((work / "v.vol.json").read_text())
    assert sidecar["dims"] == [16, 16, 16] and sidecar["spacing"] == [1.0, 1.0, 1.0]
    vol.save(work / "again.vol")
    assert (work / "again.vol").read_bytes() == (work / "v.vol").read_bytes()

    assert run("evaluate", work / "v.vol", "--phantom", BALL, "--metrics", "psnr,ssim,fwhm",
               "--profile", "x,0,0,0", "-o", work / "m.csv") == 0
    rows = list(csv.DictReader(open(work / "m.csv", newline="")))
    assert [r["metric"] for r in rows] == ["psnr", "ssim", "fwhm_x"]
    assert all(r["value"] and not r["error"] for r in rows)
    prof = list(csv.reader(open(work / "m.csv.profile.csv", newline="")))
    assert prof[0] == ["x_mm", "value"] and len(prof) == 17


def test_empty_cloud_voxelizes_to_zero(work):
    from gaussray.model import GaussianCloud, save_cloud
    save_cloud(GaussianCloud(), work / "e.grtc")
    assert run("voxelize", work / "e.grtc", "--dims", "4,5,6", "-o", work / "e.vol") == 0
    vol = VolumeGrid.load(work / "e.vol")
    assert vol.data.shape == (6, 5, 4) and not vol.data.any()


def test_evaluate_self_and_nema(work):
    from gaussray.phantom import build_nema, rasterize
    grid = VolumeGrid.centered((240, 240, 48), 1.0)
    rasterize(build_nema(), grid).save(work / "nema.vol")
    assert run("evaluate", work / "nema.vol", "--reference", work / "nema.vol", "--metrics", "psnr,ssim",
               "-o", work / "self.csv") == 0
    rows = {r["metric"]: float(r["value"]) for r in csv.DictReader(open(work / "self.csv", newline=""))}
    assert rows == {"psnr": 200.0, "ssim": 1.0}
    assert run("evaluate", work / "nema.vol", "--phantom", "nema", "--metrics", "sbr", "-o", work / "sbr.csv") == 0
    rows = list(csv.DictReader(open(work / "sbr.csv", newline="")))
    assert len(rows) == 6
    assert float(rows[5]["value"]) == pytest.approx(4.0, rel=0.02)


def test_roi_failure_becomes_error_row(work):
    VolumeGrid.centered((20, 20, 20), 1.0).like(np.ones((20, 20, 20))).save(work / "small.vol")
    assert run("evaluate", work / "small.vol", "--phantom", "nema", "--metrics", "std", "-o", work / "e.csv") == 0
    rows = list(csv.DictReader(open(work / "e.csv", newline="")))
    assert all(r["error"].startswith("RoiOutOfGrid") and r["value"] == "" for r in rows)


def test_unknown_metric_exits_2(work):
    VolumeGrid.centered((4, 4, 4), 1.0).like(np.ones((4, 4, 4))).save(work / "t.vol")
    assert run("evaluate", work / "t.vol", "--metrics", "mse", "-o", work / "x.csv") == 2

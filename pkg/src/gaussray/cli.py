"""Command-line pipelines: simulate, reconstruct, voxelize, evaluate.

Every successful command writes ``<out>.manifest.json`` next to its output.
Exit codes: 0 ok, 2 bad configuration or sidecar, 3 I/O failure, 4 numeric
failure during reconstruction.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, metrics
from .config import file_digest, read_config
from .errors import ConfigError, GaussrayError, NonFiniteLoss
from .geometry import geometry_from_config
from .model import load_cloud, save_cloud
from .optim import TrainConfig, reconstruct
from .phantom import (NEMA_SPHERE_DIAMETERS, POINT_SOURCE_POSITIONS, AnalyticPhantom, ProjectionSet,
                      add_poisson, build_nema, build_point_sources, nema_sphere_centers, parse_spheres,
                      rasterize, simulate)
from .volume import VolumeGrid

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
NEMA_BACKGROUND_CENTER = (85.0, 0.0, 0.0)  # mm, inside the background, clear of spheres and insert


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str] = None
    config_sha256: Optional[str] = None
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    seed: Optional[int] = None
    version: str = __version__
    wall_time: float = 0.0

    def write(self, out_path) -> Path:
        path = Path(str(out_path) + ".manifest.json")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _config(path) -> dict:
    try:
        return read_config(path)
    except ConfigError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None


def _phantom(name: str) -> AnalyticPhantom:
    if name == "nema":
        return build_nema()
    if name == "point-sources":
        return build_point_sources()
    if name.startswith("spheres:"):
        try:
            return parse_spheres(name.split(":", 1)[1])
        except ValueError as e:
            raise CliError(EXIT_CONFIG, f"bad sphere list: {e}") from None
    raise CliError(EXIT_CONFIG, f"unknown phantom {name!r} (nema, point-sources, spheres:<list>)")


def _load(kind, path):
    """Read an input file, mapping sidecar problems to exit 2 and I/O problems to exit 3."""
    try:
        return kind(path)
    except (json.JSONDecodeError, KeyError, TypeError, ConfigError) as e:
        raise CliError(EXIT_CONFIG, f"cannot interpret {path}: {e}") from None
    except (OSError, ValueError) as e:
        raise CliError(EXIT_IO, f"cannot read {path}: {e}") from None


def _workers(args) -> int:
    return 1 if args.deterministic else max(1, args.threads)


def cmd_simulate(args) -> RunManifest:
    cfg = _config(args.geom)
    try:
        geom = geometry_from_config(cfg)
    except ConfigError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None
    ps = simulate(_phantom(args.phantom), geom)
    if args.counts is not None:
        ps = add_poisson(ps, args.counts, args.seed)
    ps.save(args.out)
    return RunManifest("simulate", str(args.geom), file_digest(args.geom), [], [str(args.out)], args.seed)


def cmd_reconstruct(args) -> RunManifest:
    measured = _load(ProjectionSet.load, args.sinogram)
    values = _config(args.config) if args.config else {}
    try:
        config = TrainConfig.from_dict(values)
    except ConfigError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None
    overrides = {"workers": _workers(args)}
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = TrainConfig.from_dict({**config.to_dict(), **overrides})
    cloud, report = reconstruct(measured, config)
    save_cloud(cloud, args.out)
    log_path = args.log or str(args.out) + ".log.jsonl"
    report.write_log(log_path)
    return RunManifest("reconstruct", args.config, file_digest(args.config) if args.config else None,
                       [str(args.sinogram)], [str(args.out), log_path], config.seed)


def _triple(text: str, cast):
    parts = [cast(p) for p in str(text).split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise CliError(EXIT_CONFIG, f"expected one or three comma-separated values, got {text!r}")
    return parts


def cmd_voxelize(args) -> RunManifest:
    cloud = _load(load_cloud, args.cloud)
    grid = VolumeGrid.centered(_triple(args.dims, int), _triple(args.spacing, float), _triple(args.center, float))
    vol = metrics.voxelize(cloud, grid, args.k_sigma)
    vol.save(args.out)
    return RunManifest("voxelize", None, None, [str(args.cloud)], [str(args.out)])


def _spheres(name: Optional[str]):
    """(label, centre, diameter) of the spheres the ROI metrics run on."""
    if name == "nema":
        return [(f"sphere{i}", c, d) for i, (c, d) in enumerate(zip(nema_sphere_centers(), NEMA_SPHERE_DIAMETERS))]
    if name == "point-sources":
        return [(f"source{i}", np.array(c), 4.0) for i, c in enumerate(POINT_SOURCE_POSITIONS)]
    if name and name.startswith("spheres:"):
        return [(f"sphere{i}", e.center, 2 * e.radius) for i, e in enumerate(_phantom(name).elements)]
    return []


def _sphere_profile(vol: VolumeGrid, axis: str, c, d: float) -> np.ndarray:
    # one diameter either side: NEMA spheres share rows with their neighbours
    a = "xyz".index(axis)
    prof = metrics.line_profile(vol, axis, c)
    return prof[np.abs(vol.axis_centers(a) - c[a]) <= d]


def _evaluate_rows(vol: VolumeGrid, ref: Optional[VolumeGrid], wanted, spheres, axis: str, background):
    rows = []

    def attempt(metric, target, fn):
        try:
            rows.append([metric, target, repr(float(fn())), ""])
        except GaussrayError as e:
            rows.append([metric, target, "", f"{type(e).__name__}: {e}"])

    if "psnr" in wanted:
        attempt("psnr", "volume", lambda: metrics.psnr(vol, ref))
    if "ssim" in wanted:
        attempt("ssim", "volume", lambda: metrics.ssim3d(vol, ref))
    for label, c, d in spheres:
        if "fwhm" in wanted:
            attempt(f"fwhm_{axis}", label, lambda: metrics.fwhm(_sphere_profile(vol, axis, c, d),
                                                               vol.spacing["xyz".index(axis)]))
        if "sbr" in wanted:
            attempt("sbr", label, lambda: metrics.sbr(vol, c, d, background))
        if "std" in wanted:
            attempt("std", label, lambda: metrics.roi_std(vol, c, d))
    return rows


def cmd_evaluate(args) -> RunManifest:
    vol = _load(VolumeGrid.load, args.volume)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(wanted) - {"psnr", "ssim", "fwhm", "sbr", "std"}
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown metrics: {', '.join(sorted(unknown))}")
    ref = None
    phantom_name = args.phantom
    if args.reference:
        ref = _load(VolumeGrid.load, args.reference)
    elif phantom_name and {"psnr", "ssim"} & set(wanted):
        ref = rasterize(_phantom(phantom_name), vol.like(), args.supersample)
    if {"psnr", "ssim"} & set(wanted) and ref is None:
        raise CliError(EXIT_CONFIG, "psnr/ssim need --reference or --phantom")
    background = _triple(args.background, float) if args.background else NEMA_BACKGROUND_CENTER
    rows = _evaluate_rows(vol, ref, wanted, _spheres(phantom_name), args.fwhm_axis, background)
    outputs = [str(args.out)]
    try:
        metrics.write_csv(args.out, rows, ["metric", "target", "value", "error"])
        if args.profile:
            axis, *point = args.profile.split(",")
            if axis not in ("x", "y", "z") or len(point) != 3:
                raise CliError(EXIT_CONFIG, "--profile takes axis,x,y,z")
            through = [float(p) for p in point]
            try:
                prof = metrics.line_profile(vol, axis, through)
            except GaussrayError as e:
                raise CliError(EXIT_CONFIG, str(e)) from None
            a = "xyz".index(axis)
            pos = vol.axis_centers(a)
            path = str(args.out) + ".profile.csv"
            metrics.write_csv(path, [[repr(float(p)), repr(float(v))] for p, v in zip(pos, prof)],
                              [f"{axis}_mm", "value"])
            outputs.append(path)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {e}") from None
    inputs = [str(args.volume)] + ([str(args.reference)] if args.reference else [])
    return RunManifest("evaluate", None, None, inputs, outputs)


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None)
    shared.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    shared.add_argument("--deterministic", action="store_true", help="force a single worker")
    shared.add_argument("-o", "--out", required=True)
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gaussray", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[shared], help="analytic projections of a phantom")
    s.add_argument("--geom", required=True, help="scanner geometry config")
    s.add_argument("--phantom", required=True, help="nema | point-sources | spheres:x,y,z,r,a;...")
    s.add_argument("--counts", type=float, default=None, help="total expected counts for Poisson noise")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", parents=[shared], help="fit a Gaussian cloud to projections")
    r.add_argument("sinogram")
    r.add_argument("--config", default=None, help="training config (defaults otherwise)")
    r.add_argument("--log", default=None, help="line-delimited training log (default <out>.log.jsonl)")
    r.set_defaults(func=cmd_reconstruct)

    v = sub.add_parser("voxelize", parents=[shared], help="sample a cloud on a regular grid")
    v.add_argument("cloud")
    v.add_argument("--dims", required=True, help="nx,ny,nz or a single n")
    v.add_argument("--spacing", default="1", help="voxel size in mm (one or three values)")
    v.add_argument("--center", default="0", help="grid centre in mm (one or three values)")
    v.add_argument("--k-sigma", type=float, default=metrics.VOXEL_K_SIGMA)
    v.set_defaults(func=cmd_voxelize)

    e = sub.add_parser("evaluate", parents=[shared], help="image-quality metrics as CSV")
    e.add_argument("volume")
    e.add_argument("--reference", default=None, help="reference volume file")
    e.add_argument("--phantom", default=None, help="phantom name for the reference and sphere ROIs")
    e.add_argument("--metrics", default="psnr,ssim")
    e.add_argument("--fwhm-axis", default="x", choices=["x", "y", "z"])
    e.add_argument("--background", default=None, help="background cube centre x,y,z in mm")
    e.add_argument("--supersample", type=int, default=2)
    e.add_argument("--profile", default=None, help="axis,x,y,z: also write a line-profile CSV")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    t0 = time.perf_counter()
    try:
        manifest = args.func(args)
        manifest.wall_time = time.perf_counter() - t0
        manifest.write(args.out)
    except CliError as e:
        print(f"gaussray {args.command}: {e}", file=sys.stderr)
        return e.code
    except NonFiniteLoss as e:
        print(f"gaussray {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as e:
        print(f"gaussray {args.command}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"gaussray {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

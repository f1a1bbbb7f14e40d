"""Command-line surface: simulate, reconstruct, train, denoise, evaluate.

Every command takes explicit seeds and caps its parallelism with --threads
(or the CTRL_THREADS environment variable), and rerunning a command with the
same inputs produces byte-identical output payloads regardless of the thread
count.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import arrayio, metrics, presets
from .agent import TrainConfig, export_params, load_params, train
from .filters import FilterParams
from .geometry import ScanGeometry, geometry_from_dict, geometry_to_dict
from .phantom import (PhantomSpec, analytic_sinogram, format_phantom_text,
                      inject_low_dose_noise, parse_phantom_text, voxelize)
from .pipeline import PipelineConfig, PipelineResult, run as run_pipeline
from .projector import forward_project
from .rebin import default_parallel_grid, rebin_to_parallel, resolve_ffs
from .recon import (RampWindow, ReconConfig, ViewWeight, preweight,
                    ramp_filter, reconstruct_native, reconstruct_parallel)


def _load_geometry(arg: str) -> ScanGeometry:
    if arg in ("desk", "train"):
        return presets.PRESET_GEOMETRIES[arg]()
    if arg in ("desk_ffs", "train_ffs"):
        return presets.PRESET_GEOMETRIES[arg.removesuffix("_ffs")](ffs=True)
    d = {}
    with open(arg) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = line.split("=", 1)
                d[k.strip()] = v.strip()
    return geometry_from_dict(d)


def _load_phantom(arg: str) -> PhantomSpec:
    if arg == "desk":
        return presets.desk_phantom()
    with open(arg) as fh:
        return parse_phantom_text(fh.read())


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = [int(v) for v in text.replace(",", " ").split()]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ValueError("shape needs 1 or 3 integers")
    return tuple(parts)


def _recon_config(args) -> ReconConfig:
    return ReconConfig(
        ramp_window=RampWindow(args.window),
        view_weight=(ViewWeight.TRIANGULAR_FEATHER if args.feather
                     else ViewWeight.UNIFORM))


def _add_recon_flags(p):
    p.add_argument("--shape", default="64,64,64",
                   help="reconstruction grid nx,ny,nz")
    p.add_argument("--voxel", type=float, default=1.0,
                   help="voxel size (mm)")
    p.add_argument("--window", choices=["ramlak", "hann"], default="ramlak")
    p.add_argument("--feather", action="store_true",
                   help="taper view weights at the window ends")


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    spec = _load_phantom(args.spec)
    vol = voxelize(spec)
    arrayio.save_volume(args.out, vol, stage="phantom")
    if args.write_spec:
        with open(args.write_spec, "w") as fh:
            fh.write(format_phantom_text(spec))
    print(f"phantom: {vol.data.shape} voxels, densities "
          f"[{vol.data.min():.4f}, {vol.data.max():.4f}] -> {args.out}")
    return 0


def cmd_scan(args) -> int:
    spec = _load_phantom(args.phantom)
    geom = _load_geometry(args.geom)
    if args.numeric:
        sino = forward_project(voxelize(spec), geom)
    else:
        sino = analytic_sinogram(spec, geom)
    if args.dose is not None:
        if not math.isfinite(args.dose) or args.dose <= 0:
            raise ValueError("--dose must be a positive photon count")
        sino = inject_low_dose_noise(sino, args.dose, args.seed)
    arrayio.save_sinogram(args.out, sino, stage="scan", seed=args.seed)
    print(f"scan: {sino.data.shape} rays, "
          f"{'numeric' if args.numeric else 'analytic'} projector, "
          f"dose={'none' if args.dose is None else args.dose} -> {args.out}")
    return 0


def cmd_recon(args) -> int:
    sino = arrayio.load_sinogram(args.sino)
    cfg = _recon_config(args)
    shape = _parse_shape(args.shape)
    if args.native:
        vol = reconstruct_native(sino, cfg, shape, args.voxel,
                                 literal_axial_term=args.literal_axial)
    else:
        resolved = resolve_ffs(sino)
        par = rebin_to_parallel(resolved, default_parallel_grid(resolved.geom))
        filt = ramp_filter(preweight(par), cfg.ramp_window)
        vol = reconstruct_parallel(filt, cfg, shape, args.voxel)
    arrayio.save_volume(args.out, vol, stage="recon")
    if args.coverage_out and vol.coverage is not None:
        cov = vol.copy()
        cov.data = vol.coverage.astype(np.float64)
        arrayio.save_volume(args.coverage_out, cov, stage="coverage")
    print(f"recon: {'native' if args.native else 'parallel'} path, "
          f"{shape} grid -> {args.out}")
    return 0


def cmd_train(args) -> int:
    spec = _load_phantom(args.phantom)
    geom = _load_geometry(args.geom)
    gt = voxelize(spec)
    sino = analytic_sinogram(spec, geom)
    sino = inject_low_dose_noise(sino, args.dose, args.seed)
    cfg = TrainConfig(sino=sino, gt=gt, shape=_parse_shape(args.shape),
                      voxel_size=args.voxel,
                      recon=_recon_config(args),
                      steps_per_episode=args.steps)
    result = train(args.episodes, cfg, args.seed)
    report = export_params(result.params, args.out,
                           training_param_count=result.training_param_count)
    if args.log:
        with open(args.log, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "return", "loss", "sino_sigma_s",
                             "sino_sigma_i", "vol_sigma_s", "vol_sigma_i"])
            for row in result.log:
                writer.writerow([row["episode"], repr(row["return"]),
                                 repr(row["loss"]),
                                 repr(row["sino_sigma_s"]),
                                 repr(row["sino_sigma_i"]),
                                 repr(row["vol_sigma_s"]),
                                 repr(row["vol_sigma_i"])])
    print(f"train: {args.episodes} episodes, reward "
          f"{result.initial_reward:.4f} -> {result.final_reward:.4f}")
    print(f"train: inference params {report['inference_param_count']}, "
          f"training params {report['training_param_count']} -> {args.out}")
    return 0


def cmd_denoise(args) -> int:
    sino = arrayio.load_sinogram(args.sino)
    params = load_params(args.params) if args.params else FilterParams()
    gt = arrayio.load_volume(args.gt) if args.gt else None
    cfg = PipelineConfig(
        n_iterations=args.iters,
        params=params,
        recon=_recon_config(args),
        shape=_parse_shape(args.shape),
        voxel_size=args.voxel,
        emit_intermediates=args.intermediates is not None,
        intermediates_dir=args.intermediates or ".")
    if args.intermediates:
        os.makedirs(args.intermediates, exist_ok=True)
    result: PipelineResult = run_pipeline(sino, cfg, gt)
    arrayio.save_volume(args.out, result.volume, stage="denoised")
    if args.report:
        for stage, rep in result.reports:
            metrics.append_report(args.report, stage, rep)
    print(f"denoise: {result.iterations_run} iteration(s), "
          f"{len(result.artifacts)} intermediate file(s) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    a = arrayio.load_volume(args.a)
    ref = arrayio.load_volume(args.ref)
    roi = None
    if args.roi:
        roi = arrayio.load_volume(args.roi).data > 0.5
    rep = metrics.quality_report(a.data, ref.data, roi)
    metrics.append_report(args.out, os.path.basename(args.a), rep)
    print(f"eval: psnr={rep.psnr} ssim={rep.ssim:.5f} "
          f"gssim={rep.gssim:.5f} reward={rep.reward:.5f} -> {args.out}")
    return 0


def cmd_slices(args) -> int:
    from PIL import Image

    vol = arrayio.load_volume(args.vol)
    axis = {"z": 0, "y": 1, "x": 2}[args.axis]
    data = np.moveaxis(vol.data, axis, 0)
    if args.window:
        lo, hi = args.window
    else:
        lo, hi = float(vol.data.min()), float(vol.data.max())
    if hi <= lo:
        hi = lo + 1.0
    os.makedirs(args.out, exist_ok=True)
    for i in range(data.shape[0]):
        img = np.clip((data[i] - lo) / (hi - lo), 0.0, 1.0)
        img8 = (img * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(img8, mode="L").save(
            os.path.join(args.out, f"slice_{args.axis}{i:03d}.png"))
    print(f"slices: wrote {data.shape[0]} PNGs (window [{lo:.5g}, {hi:.5g}]) "
          f"-> {args.out}")
    return 0


def cmd_geom(args) -> int:
    geom = _load_geometry(args.preset)
    with open(args.out, "w") as fh:
        for k, v in geometry_to_dict(geom).items():
            fh.write(f"{k}={v}\n")
    print(f"geom: {args.preset} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ctrl",
        description="Helical cone-beam CT: simulate, reconstruct, learn "
                    "filter strengths, denoise.")
    ap.add_argument("--threads", type=int, default=None,
                    help="cap worker threads (default: CTRL_THREADS or all "
                         "cores)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="voxelize an ellipsoid phantom spec")
    p.add_argument("--spec", required=True,
                   help="phantom spec file, or 'desk'")
    p.add_argument("--out", required=True)
    p.add_argument("--write-spec", default=None,
                   help="also dump the spec text (useful with --spec desk)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("scan", help="simulate a helical acquisition")
    p.add_argument("--phantom", required=True,
                   help="phantom spec file, or 'desk'")
    p.add_argument("--geom", required=True,
                   help="geometry file, or preset: desk, desk_ffs, train, "
                        "train_ffs")
    p.add_argument("--dose", type=float, default=None,
                   help="incident photons per ray (omit for noiseless)")
    p.add_argument("--seed", type=int, default=0)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--analytic", action="store_true", default=True,
                      help="exact ellipsoid line integrals (default)")
    mode.add_argument("--numeric", action="store_true",
                      help="ray-trace the voxelized phantom instead")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("recon", help="filtered backprojection")
    p.add_argument("--sino", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--native", action="store_true",
                   help="coarse native-geometry reference path")
    p.add_argument("--literal-axial", action="store_true",
                   help="native path: use the literal axial distance term")
    p.add_argument("--coverage-out", default=None,
                   help="also write the coverage mask volume")
    _add_recon_flags(p)
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("train", help="learn the four filter strengths")
    p.add_argument("--phantom", required=True)
    p.add_argument("--geom", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dose", type=float, default=200.0)
    p.add_argument("--steps", type=int, default=8,
                   help="actions per episode (agents alternate)")
    p.add_argument("--out", required=True, help="learned parameter file")
    p.add_argument("--log", default=None, help="per-episode CSV log")
    _add_recon_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="iterative bilateral denoising")
    p.add_argument("--sino", required=True)
    p.add_argument("--params", default=None,
                   help="learned parameter file (default: built-in sigmas)")
    p.add_argument("--iters", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--intermediates", default=None,
                   help="directory for per-stage artifacts")
    p.add_argument("--gt", default=None,
                   help="ground-truth volume for per-stage reports")
    p.add_argument("--report", default=None, help="per-stage metrics CSV")
    _add_recon_flags(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR/SSIM/GSSIM/reward of two volumes")
    p.add_argument("--a", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--roi", default=None,
                   help="mask volume (nonzero = evaluate here)")
    p.add_argument("--out", required=True, help="CSV to append to")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("slices", help="export 8-bit PNG slices")
    p.add_argument("--vol", required=True)
    p.add_argument("--axis", choices=["z", "y", "x"], default="z")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--window", nargs=2, type=float, default=None,
                   metavar=("LO", "HI"))
    p.set_defaults(func=cmd_slices)

    p = sub.add_parser("geom", help="write a preset geometry file")
    p.add_argument("--preset", required=True,
                   choices=["desk", "desk_ffs", "train", "train_ffs"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_geom)

    return ap


def _apply_threads(n: int | None):
    import numba

    if n is None:
        env = os.environ.get("CTRL_THREADS")
        n = int(env) if env else None
    if n is not None:
        numba.set_num_threads(max(1, n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except Exception as e:
        print(f"ctrl {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: simulate, run, eval, bench.

Exit codes: 0 success, 2 data error, 3 stability error, 4 configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from . import bench, raster_io
from .errors import ConfigurationError, DataError, StructFlowError
from .evaluation import AAE_CONVENTION, ErrorSummary, encode_normal_flow, encode_tangent_flow_colorwheel
from .filter import FilterConfig, default_smoothing, filter_step, init_state
from .simulator import PRESETS, Pose, Trajectory, camera_from_section, load_scene, scene_to_ini, simulate
from .sphere_grid import build_gnomonic_patch, build_pyramid

SEQUENCE_FILE = "sequence.ini"
RUN_FILE = "run.ini"
METRICS_FILE = "metrics.csv"


def frame_name(index, kind, ext="sfr"):
    return f"frame_{index:05d}_{kind}.{ext}"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def _set_threads(n):
    if n is None:
        return
    import numba

    if n < 1:
        raise ConfigurationError("--threads must be >= 1")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# sequence metadata


def write_sequence_info(path, rows, cols, fov, frames, frame_rate, source):
    parser = configparser.ConfigParser()
    parser["sequence"] = {
        "rows": str(rows),
        "cols": str(cols),
        "fov_deg": repr(float(fov)),
        "frames": str(frames),
        "frame_rate": repr(float(frame_rate)),
        "flow_units": "rad/frame",
        "depth_units": "m",
        "source": source,
    }
    with open(path, "w") as fh:
        parser.write(fh)


def read_sequence_info(directory, name=SEQUENCE_FILE):
    path = Path(directory) / name
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise DataError(f"{path} not found; not a sequence directory")
    try:
        sec = parser["sequence"]
        return {
            "rows": sec.getint("rows"),
            "cols": sec.getint("cols"),
            "fov": sec.getfloat("fov_deg"),
            "frames": sec.getint("frames"),
            "frame_rate": sec.getfloat("frame_rate"),
        }
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: incomplete sequence header ({exc})") from exc


def _check_frames(directory, count, kinds):
    missing = [
        frame_name(k, kind)
        for k in range(count)
        for kind in kinds
        if not (Path(directory) / frame_name(k, kind)).is_file()
    ]
    if missing:
        raise DataError(f"{directory}: missing {len(missing)} frame file(s), first gap at {missing[0]}")


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    if args.frames < 0:
        raise ConfigurationError("--frames must be non-negative")
    if args.scene:
        scene, camera = load_scene(args.scene)
        trajectory = camera_from_section(camera, args.frame_rate)
        source = str(args.scene)
    else:
        if args.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        make_scene, cam = PRESETS[args.preset]
        scene = make_scene()
        trajectory = Trajectory(Pose(), cam, args.frame_rate or 300.0)
        source = f"preset:{args.preset}"
    grid = build_gnomonic_patch(args.fov, args.resolution, args.resolution)
    out = _out_dir(args.out)
    peak = 0.0
    for fr in simulate(scene, trajectory, grid, args.frames):
        raster_io.write_raster(out / frame_name(fr.index, "brightness"), fr.brightness, "1")
        raster_io.write_raster(out / frame_name(fr.index, "depth"), fr.depth, "m")
        raster_io.write_raster(out / frame_name(fr.index, "flow"), fr.flow, "rad/frame")
        peak = max(peak, float(np.max(np.linalg.norm(fr.flow, axis=-1) / grid.pixel_separation)))
    (out / "scene.ini").write_text(scene_to_ini(scene, trajectory))
    write_sequence_info(out / SEQUENCE_FILE, grid.height, grid.width, args.fov, args.frames, trajectory.frame_rate, source)
    print(f"wrote {args.frames} frames to {out} (max ground-truth flow {peak:.3f} px)")
    return 0


def _filter_config(args):
    overrides = {"max_flow": args.max_flow, "levels": args.levels}
    if args.config:
        return FilterConfig.from_file(args.config, **overrides)
    kwargs = {k: v for k, v in overrides.items() if v is not None}
    if "levels" in kwargs:
        kwargs["smooth_iterations"] = default_smoothing(kwargs["levels"])
    return FilterConfig(**kwargs)


def cmd_run(args):
    _set_threads(args.threads)
    info = read_sequence_info(args.sequence)
    config = _filter_config(args)
    count = info["frames"] if args.frames is None else min(args.frames, info["frames"])
    _check_frames(args.sequence, count, ("brightness", "depth"))
    grids = build_pyramid(info["fov"], info["rows"], info["cols"], config.levels)
    out = _out_dir(args.out)
    seq = Path(args.sequence)

    state = None
    for k in range(count):
        image, _ = raster_io.read_raster(seq / frame_name(k, "brightness"))
        depth, _ = raster_io.read_raster(seq / frame_name(k, "depth"))
        depth = depth.astype(np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        rho = np.where(valid, 1.0 / np.where(valid, depth, 1.0), 0.0)
        if state is None:
            state = init_state(grids, image, rho, valid)
        else:
            state = filter_step(state, grids, image, rho, config, valid)
        raster_io.write_raster(out / frame_name(k, "flow"), state.flow, "rad/frame")
        raster_io.write_raster(out / frame_name(k, "rho"), state.rho[0], "1/m")
        raster_io.write_ppm(out / frame_name(k, "tangent", "ppm"), encode_tangent_flow_colorwheel(grids[0], state.flow, config.max_flow))
        raster_io.write_ppm(out / frame_name(k, "normal", "ppm"), encode_normal_flow(grids[0], state.flow, config.max_flow))

    write_sequence_info(out / RUN_FILE, info["rows"], info["cols"], info["fov"], count, info["frame_rate"], str(seq))
    (out / "filter.ini").write_text(config.to_ini())
    print(f"processed {count} frames into {out}")
    return 0


def evaluate_directories(estimates, ground_truth):
    """ErrorSummary over the frames present in both directories."""
    info = read_sequence_info(ground_truth)
    est_info = read_sequence_info(estimates, RUN_FILE) if (Path(estimates) / RUN_FILE).is_file() else info
    if (est_info["rows"], est_info["cols"], est_info["fov"]) != (info["rows"], info["cols"], info["fov"]):
        raise DataError("estimate and ground-truth grids differ")
    count = min(info["frames"], est_info["frames"])
    _check_frames(ground_truth, count, ("flow",))
    _check_frames(estimates, count, ("flow",))
    grid = build_gnomonic_patch(info["fov"], info["rows"], info["cols"])
    summary = ErrorSummary()
    for k in range(count):
        w_gt, unit_gt = raster_io.read_raster(Path(ground_truth) / frame_name(k, "flow"))
        w, unit = raster_io.read_raster(Path(estimates) / frame_name(k, "flow"))
        if unit != unit_gt:
            raise DataError(f"frame {k}: unit mismatch {unit!r} vs {unit_gt!r}")
        summary.add(grid, w_gt, w, frame=k)
    return summary


def cmd_eval(args):
    summary = evaluate_directories(args.estimates, args.ground_truth)
    out = Path(args.out) if args.out else Path(args.estimates) / METRICS_FILE
    try:
        summary.write_csv(out)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    print(f"frames: {len(summary.frames)}")
    print(f"mean RMSE: {summary.mean_rmse:.6f} px")
    print(f"mean AAE: {summary.mean_aae:.6f} deg ({AAE_CONVENTION})")
    print(f"metrics written to {out}")
    return 0


def cmd_bench(args):
    _set_threads(args.threads)
    if args.repetitions < 1:
        raise ConfigurationError("--repetitions must be >= 1")
    rows = bench.run_benchmark(args.resolution, args.max_flow, args.levels, args.repetitions)
    print(f"resolution {args.resolution}x{args.resolution}, levels {args.levels}, "
          f"max flow {args.max_flow} px, {args.repetitions} repetition(s), threads {args.threads or 'default'}")
    print(bench.format_table(rows))
    return 0


# --------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="structflow", description="Structure flow estimation from brightness and depth sequences.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="render a synthetic sequence with ground truth")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scene", help="scene description file")
    src.add_argument("--preset", default="corridor", help=f"built-in scene: {', '.join(sorted(PRESETS))}")
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--fov", type=float, default=90.0, help="horizontal field of view in degrees")
    p.add_argument("--frame-rate", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the filter over a sequence directory")
    p.add_argument("sequence")
    p.add_argument("--config")
    p.add_argument("--frames", type=int)
    p.add_argument("--max-flow", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="compare estimates against ground truth")
    p.add_argument("estimates")
    p.add_argument("ground_truth")
    p.add_argument("--out", help=f"CSV path (default: ESTIMATES/{METRICS_FILE})")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-stage timing of filter steps")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--max-flow", type=float, default=2.0)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--repetitions", type=int, default=20)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except StructFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

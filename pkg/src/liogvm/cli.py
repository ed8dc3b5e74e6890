"""Command-line entry point.

Exit codes: 0 success, 1 input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import PipelineConfig, defaults_text, load_config, make_config
from .errors import InsufficientOverlap, LioGvmError, NumericalError
from .manifold import log_so3
from .pipeline import ScanError
from .sim import (
    aliased_world,
    constant_velocity_trajectory,
    default_trajectory,
    default_world,
    evaluate_ate_are,
    synthesize,
)

log = logging.getLogger("liogvm")

WORLDS = {"room": default_world, "aliased": aliased_world}
TRAJECTORIES = {
    "default": lambda **kw: default_trajectory(noisy=False, **kw),
    "noisy": lambda **kw: default_trajectory(noisy=True, **kw),
    "constant-velocity": constant_velocity_trajectory,
}


def _exit_code(err: BaseException) -> int:
    if isinstance(err, ScanError):
        err = err.cause
    if isinstance(err, NumericalError):
        return 2
    return 1


def cmd_simulate(args) -> int:
    world = WORLDS[args.world](seed=args.seed)
    kw = {"seed": args.seed, "points_per_scan": args.points_per_scan}
    if args.duration is not None:
        kw["duration"] = args.duration
    traj = TRAJECTORIES[args.traj](**kw)
    data = synthesize(world, traj)
    ext = data.extrinsic
    # simulator scans are already sparse, so no extra downsampling
    cfg = make_config({
        "extrinsic_rotvec_rad": [float(v) for v in log_so3(ext.rot)],
        "extrinsic_trans_m": [float(v) for v in ext.trans],
        "downsample_leaf_m": 0.0,
        "data_dir": str(args.out),
    }, env={})
    io.write_dataset(data, io.ensure_dir(args.out), cfg)
    print(f"wrote {len(data.imu)} IMU samples and {len(data.scans)} scans to {args.out}")
    return 0


def _load_cfg(path) -> PipelineConfig:
    return load_config(path) if path else make_config()


def cmd_run(args) -> int:
    cfg = _load_cfg(args.config)
    odo = io.run_pipeline(cfg, args.data, args.out)
    print(f"processed {len(odo.trajectory)} scans; outputs in {args.out}")
    gt_path = Path(args.data) / io.GT_FILE
    if gt_path.is_file():
        try:
            _report(Path(args.out) / "trajectory.txt", gt_path)
        except InsufficientOverlap as err:
            print(f"no ATE/ARE: {err}")
    return 0


def _report(est_path, gt_path):
    est_t, est = io.read_trajectory(est_path)
    gt_t, gt = io.read_trajectory(gt_path)
    _, est, gt = io.align_by_time(est_t, est, gt_t, gt)
    ate, are = evaluate_ate_are(est, gt)
    print(f"ate_pct: {ate:.6f}")
    print(f"are_deg_per_10m: {are:.6f}")


def cmd_evaluate(args) -> int:
    _report(args.est, args.gt)
    return 0


def cmd_export_map(args) -> int:
    gmap = io.read_map(args.map)
    rows = [
        [*key, int(gmap.counts[row]), *gmap.centroids[row], *gmap.covs[row][np.triu_indices(3)]]
        for key, row in gmap.index.items()
    ]
    header = "ix,iy,iz,count,mx,my,mz,cxx,cxy,cxz,cyy,cyz,czz"
    lines = [header] + [",".join(repr(float(v)) if i >= 4 else str(v) for i, v in enumerate(r))
                        for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(rows)} voxels to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_config(args) -> int:
    if args.check:
        load_config(args.check)
        print(f"{args.check}: ok")
        return 0
    sys.stdout.write(defaults_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="liogvm", description="LiDAR-inertial odometry on a Gaussian voxel map")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--world", choices=sorted(WORLDS), default="room")
    s.add_argument("--traj", choices=sorted(TRAJECTORIES), default="default")
    s.add_argument("--out", required=True)
    s.add_argument("--duration", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points-per-scan", type=int, default=5000)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run the odometry over a dataset directory")
    r.add_argument("--config")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="ATE/ARE of a trajectory against ground truth")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("export-map", help="dump a binary map file as CSV")
    m.add_argument("--map", required=True)
    m.add_argument("--out")
    m.set_defaults(func=cmd_export_map)

    c = sub.add_parser("config", help="print the default config or validate a file")
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--defaults", action="store_true")
    g.add_argument("--check")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (LioGvmError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return _exit_code(err) if isinstance(err, LioGvmError) else 1


if __name__ == "__main__":
    sys.exit(main())

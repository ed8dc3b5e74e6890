"""On-disk formats, dataset layout and the file-driven pipeline run.

Dataset directory::

    imu.txt           t wx wy wz ax ay az, one sample per line
    scans/<t>.scan    one binary file per scan, ``<t>`` the scan-end time
    groundtruth.txt   optional, trajectory format at scan-end times
    config.yaml       optional, written by the simulator

Trajectory files hold ``t x y z qw qx qy qz`` per line.
"""
from __future__ import annotations

import logging
import os
import struct
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .config import PipelineConfig, dump_config
from .errors import (
    BadMagic,
    InputError,
    InsufficientOverlap,
    NonMonotonicTimestamps,
    ParseError,
    TruncatedRecord,
)
from .gvm import GaussianVoxelMap
from .imu import ImuSample
from .lidar import RawPoint
from .pipeline import Odometry, ScanMetrics, run_sequence
from .sim import SimData, frame_pairs, make_poses, relative_errors

log = logging.getLogger(__name__)

SCAN_MAGIC = b"LGVS"
SCAN_VERSION = 1
SCAN_HEADER = len(SCAN_MAGIC) + 1
SCAN_DTYPE = np.dtype([("t", "<f8"), ("x", "<f4"), ("y", "<f4"), ("z", "<f4")])

MAP_MAGIC = b"LGVM"
MAP_VERSION = 1
MAP_HEADER = struct.Struct("<4sBdQ")
MAP_RECORD = struct.Struct("<4i9f")
_TRIU = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))

IMU_FILE = "imu.txt"
SCAN_DIR = "scans"
SCAN_SUFFIX = ".scan"
GT_FILE = "groundtruth.txt"
CONFIG_FILE = "config.yaml"


class IoError(InputError):
    pass


def _fmt(x) -> str:
    return repr(float(x))


# -- IMU --------------------------------------------------------------------


def write_imu(path, samples) -> None:
    with open(path, "w") as fh:
        for s in samples:
            vals = [s.t, *s.gyro, *s.acc]
            fh.write(" ".join(_fmt(v) for v in vals) + "\n")


def read_imu(path) -> list[ImuSample]:
    """Parse whitespace- or comma-delimited IMU lines; ``#`` starts a comment."""
    out: list[ImuSample] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 7:
                raise ParseError(f"expected 7 fields, got {len(parts)}", lineno)
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite value", lineno)
            if out and vals[0] <= out[-1].t:
                raise NonMonotonicTimestamps(
                    f"{path}: line {lineno}: t={vals[0]!r} does not follow t={out[-1].t!r}"
                )
            out.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return out


# -- scans ------------------------------------------------------------------


def scan_filename(t_end: float) -> str:
    return _fmt(t_end) + SCAN_SUFFIX


def scan_time(path) -> float:
    name = Path(path).name
    if not name.endswith(SCAN_SUFFIX):
        raise IoError(f"{path}: scan files must end in {SCAN_SUFFIX}")
    try:
        return float(name[: -len(SCAN_SUFFIX)])
    except ValueError as exc:
        raise IoError(f"{path}: scan-end time not encoded in the file name") from exc


def write_scan(path, xyz, t) -> None:
    xyz = np.asarray(xyz)
    rec = np.empty(len(xyz), dtype=SCAN_DTYPE)
    rec["t"] = t
    rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    with open(path, "wb") as fh:
        fh.write(SCAN_MAGIC + bytes([SCAN_VERSION]))
        fh.write(rec.tobytes())


def read_scan_arrays(path):
    """``(xyz, t)`` with float32 coordinates widened to float64."""
    data = Path(path).read_bytes()
    if len(data) < SCAN_HEADER or data[:4] != SCAN_MAGIC:
        raise BadMagic(f"{path}: not a scan file")
    if data[4] != SCAN_VERSION:
        raise BadMagic(f"{path}: unsupported scan version {data[4]}")
    body = len(data) - SCAN_HEADER
    n, rest = divmod(body, SCAN_DTYPE.itemsize)
    if rest:
        raise TruncatedRecord(path, SCAN_HEADER + n * SCAN_DTYPE.itemsize)
    rec = np.frombuffer(data, dtype=SCAN_DTYPE, count=n, offset=SCAN_HEADER)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    return xyz, rec["t"].astype(np.float64)


def read_scan(path) -> list[RawPoint]:
    xyz, t = read_scan_arrays(path)
    return [RawPoint(p, float(ti)) for p, ti in zip(xyz, t)]


def list_scans(data_dir) -> list[tuple[float, Path]]:
    folder = Path(data_dir) / SCAN_DIR
    if not folder.is_dir():
        raise IoError(f"{folder}: scan directory missing")
    items = [(scan_time(p), p) for p in folder.iterdir() if p.suffix == SCAN_SUFFIX]
    return sorted(items)


# -- trajectories -----------------------------------------------------------


def rot_to_quat(R) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return -q if w < 0 else q


def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def write_trajectory(path, times, poses) -> None:
    with open(path, "w") as fh:
        for t, T in zip(times, poses):
            vals = [t, *T[:3, 3], *rot_to_quat(T[:3, :3])]
            fh.write(" ".join(_fmt(v) for v in vals) + "\n")


def read_trajectory(path):
    """Returns ``(times, poses)`` with poses as (N, 4, 4)."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 8:
                raise ParseError(f"expected 8 fields, got {len(parts)}", lineno)
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
            if abs(np.linalg.norm(vals[4:]) - 1.0) > 1e-6:
                raise ParseError("quaternion is not unit norm", lineno)
            rows.append(vals)
    if not rows:
        return np.zeros(0), np.zeros((0, 4, 4))
    arr = np.array(rows)
    rot = np.array([quat_to_rot(q) for q in arr[:, 4:]])
    return arr[:, 0], make_poses(rot, arr[:, 1:4])


def align_by_time(est_t, est_poses, gt_t, gt_poses):
    """Restrict both trajectories to their shared timestamps (exact match)."""
    common, ie, ig = np.intersect1d(est_t, gt_t, assume_unique=True, return_indices=True)
    if len(common) < 2:
        raise InsufficientOverlap("estimate and ground truth share fewer than two timestamps")
    return common, est_poses[ie], gt_poses[ig]


# -- map export -------------------------------------------------------------


def export_map(gmap: GaussianVoxelMap, path) -> None:
    """Counted header, then one 52-byte record per voxel.

    Record: ix, iy, iz, count (int32), centroid (3 x float32), upper
    triangle of the covariance (6 x float32).
    """
    n = len(gmap)
    if n == 0:
        raise IoError("refusing to export an empty map")
    keys = gmap.keys
    if np.abs(keys).max() >= 2**31 or gmap.counts.max() >= 2**31:
        raise IoError("voxel keys or counts exceed 32-bit range")
    rec = np.empty(n, dtype=np.dtype([("k", "<i4", 4), ("f", "<f4", 9)]))
    rec["k"][:, :3] = keys
    rec["k"][:, 3] = gmap.counts
    rec["f"][:, :3] = gmap.centroids
    covs = gmap.covs
    for c, (a, b) in enumerate(_TRIU):
        rec["f"][:, 3 + c] = covs[:, a, b]
    try:
        with open(path, "wb") as fh:
            fh.write(MAP_HEADER.pack(MAP_MAGIC, MAP_VERSION, gmap.voxel_size, n))
            fh.write(rec.tobytes())
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


def read_map(path) -> GaussianVoxelMap:
    data = Path(path).read_bytes()
    if len(data) < MAP_HEADER.size:
        raise BadMagic(f"{path}: not a map file")
    magic, version, r, n = MAP_HEADER.unpack_from(data)
    if magic != MAP_MAGIC or version != MAP_VERSION:
        raise BadMagic(f"{path}: not a version {MAP_VERSION} map file")
    need = MAP_HEADER.size + n * MAP_RECORD.size
    if len(data) < need:
        whole = (len(data) - MAP_HEADER.size) // MAP_RECORD.size
        raise TruncatedRecord(path, MAP_HEADER.size + whole * MAP_RECORD.size)
    rec = np.frombuffer(data, dtype=np.dtype([("k", "<i4", 4), ("f", "<f4", 9)]),
                        count=n, offset=MAP_HEADER.size)
    gmap = GaussianVoxelMap(r, capacity=max(n, 1))
    for k, f in zip(rec["k"], rec["f"]):
        cov = np.empty((3, 3))
        for c, (a, b) in enumerate(_TRIU):
            cov[a, b] = cov[b, a] = f[3 + c]
        gmap.insert(k[:3], f[:3].astype(float), cov, int(k[3]))
    return gmap


# -- plot data --------------------------------------------------------------


def _write_table(path, header, rows, comment=None):
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def prefix_ate_are(est_poses, gt_poses):
    """ATE/ARE of every trajectory prefix; NaN until a frame pair fits.

    A prefix ending at frame k uses exactly the frame pairs whose end frame
    is at most k, so one pass over the full pair set covers all prefixes.
    """
    n = len(gt_poses)
    ate = np.full(n, np.nan)
    are = np.full(n, np.nan)
    pairs = frame_pairs(gt_poses)
    if not pairs:
        return ate, are
    t_err, r_err = relative_errors(est_poses, gt_poses, pairs)
    ends = np.array([j for _, j, _ in pairs])
    for k in range(n):
        sel = ends <= k
        if np.any(sel):
            ate[k] = 100.0 * float(t_err[sel].mean())
            are[k] = float(np.degrees(r_err[sel].mean()) * 10.0)
    return ate, are


def emit_plot_data(metrics: list[ScanMetrics], times, est_poses, out_dir, gt_poses=None):
    """Write ``timing.csv``, ``errors.csv`` and ``overlay.csv`` (one row per scan)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(
        out / "timing.csv",
        ["index", "t", "points", "distributions", "correspondences", "iterations",
         "degenerate", "fit_ms", "match_ms", "map_ms", "total_ms"],
        [[m.index, float(m.t), m.points, m.distributions, m.correspondences, m.iterations,
          int(m.degenerate), float(m.fit_ms), float(m.match_ms), float(m.map_ms),
          float(m.total_ms)] for m in metrics],
    )
    if gt_poses is None:
        _write_table(out / "errors.csv", ["index", "t"],
                     [[i, float(t)] for i, t in enumerate(times)],
                     comment="no ground truth: error columns omitted")
        _write_table(out / "overlay.csv", ["t", "est_x", "est_y", "est_z"],
                     [[float(t), *map(float, T[:3, 3])] for t, T in zip(times, est_poses)])
        return
    A = est_poses[0] @ np.linalg.inv(gt_poses[0])
    aligned = A @ gt_poses
    trans = np.linalg.norm(est_poses[:, :3, 3] - aligned[:, :3, 3], axis=1)
    rel = np.einsum("nij,nkj->nik", est_poses[:, :3, :3], aligned[:, :3, :3])
    ang = np.degrees(np.arccos(np.clip((np.trace(rel, axis1=1, axis2=2) - 1) / 2, -1, 1)))
    ate, are = prefix_ate_are(est_poses, gt_poses)
    _write_table(
        out / "errors.csv",
        ["index", "t", "trans_err_m", "rot_err_deg", "ate_pct", "are_deg_per_10m"],
        [[i, float(t), float(trans[i]), float(ang[i]), float(ate[i]), float(are[i])]
         for i, t in enumerate(times)],
    )
    _write_table(
        out / "overlay.csv",
        ["t", "est_x", "est_y", "est_z", "gt_x", "gt_y", "gt_z"],
        [[float(t), *map(float, est_poses[i, :3, 3]), *map(float, aligned[i, :3, 3])]
         for i, t in enumerate(times)],
    )


# -- datasets and the full run ---------------------------------------------


def write_dataset(data: SimData, out_dir, cfg: PipelineConfig | None = None) -> None:
    """Write a simulator run in the dataset layout, plus a matching config."""
    out = Path(out_dir)
    (out / SCAN_DIR).mkdir(parents=True, exist_ok=True)
    write_imu(out / IMU_FILE, data.imu)
    for scan in data.scans:
        write_scan(out / SCAN_DIR / scan_filename(scan.t_end), scan.xyz, scan.t)
    write_trajectory(out / GT_FILE, data.gt.scan_times, data.gt.scan_poses())
    if cfg is not None:
        (out / CONFIG_FILE).write_text(dump_config(cfg))


def load_dataset(data_dir):
    """``(imu, scans, gt)``; ``scans`` lists ``(t_end, path)``, ``gt`` may be None."""
    root = Path(data_dir)
    imu_path = root / IMU_FILE
    if not imu_path.is_file():
        raise IoError(f"{imu_path}: IMU file missing")
    imu = read_imu(imu_path)
    scans = list_scans(root)
    gt = read_trajectory(root / GT_FILE) if (root / GT_FILE).is_file() else None
    return imu, scans, gt


def run_pipeline(cfg: PipelineConfig, data_dir=None, out_dir=None) -> Odometry:
    """Run the odometry over a dataset directory and write all outputs.

    Outputs: ``trajectory.txt``, ``timing.csv`` (per-scan metrics and stage
    timings), ``errors.csv``, ``overlay.csv``, ``config.yaml`` and, when
    enabled, ``map.gvm``.
    """
    data_dir = data_dir or cfg.data_dir
    out_dir = out_dir or cfg.out_dir
    if not data_dir or not out_dir:
        raise IoError("both a data directory and an output directory are required")
    imu, scans, gt = load_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def stream():
        for t_end, path in scans:
            xyz, t = read_scan_arrays(path)
            yield t_end, xyz, t

    odo = run_sequence(cfg, imu, stream())
    times = np.array([t for t, _, _ in odo.trajectory])
    poses = odo.poses()
    write_trajectory(out / "trajectory.txt", times, poses)
    (out / CONFIG_FILE).write_text(dump_config(cfg))
    gt_poses = None
    if gt is not None:
        try:
            _, poses_c, gt_poses = align_by_time(times, poses, *gt)
            if len(poses_c) != len(poses):
                log.warning("ground truth misses some scan times; error columns omitted")
                gt_poses = None
        except InsufficientOverlap:
            log.warning("ground truth does not overlap the estimate; error columns omitted")
    emit_plot_data(odo.metrics, times, poses, out, gt_poses)
    if cfg.export_map and odo.map is not None and len(odo.map):
        export_map(odo.map, out / "map.gvm")
    return odo


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"{p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise IoError(f"{p}: not writable")
    return p

"""Per-scan odometry loop: propagate, deskew, fit, match/update, map update."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .errors import ImuCoverageError, LioGvmError
from .gvm import GaussianVoxelMap, init_map, update_map, voxelize_scan
from .ieskf import iterated_update
from .imu import ImuSample, initialize_gravity, propagate
from .lidar import deskew, fit_distributions, range_filter, voxel_downsample
from .manifold import FilterState
from .matching import project_distributions

log = logging.getLogger(__name__)


@dataclass
class ScanMetrics:
    index: int
    t: float
    points: int
    distributions: int
    correspondences: int
    iterations: int
    degenerate: bool
    fit_ms: float
    match_ms: float
    map_ms: float
    total_ms: float


class ScanError(LioGvmError):
    """Wraps a module error with the index of the scan being processed."""

    def __init__(self, index, t, err):
        super().__init__(f"scan {index} (t={t:.6f}): {err}")
        self.index = index
        self.cause = err


class Odometry:
    """Stateful filter + map; feed scans in time order with their IMU data."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.ext = cfg.extrinsic()
        self.noise = cfg.noise()
        self.ieskf_cfg = cfg.ieskf()
        self.state: FilterState | None = None
        self.cov: np.ndarray | None = None
        self.t: float | None = None
        self.map: GaussianVoxelMap | None = None
        self.trajectory: list[tuple[float, np.ndarray, np.ndarray]] = []
        self.metrics: list[ScanMetrics] = []

    def _fit(self, xyz):
        cfg = self.cfg
        return fit_distributions(xyz, cfg.fit_neighbors, cfg.cov_floor_rel, cfg.cov_floor_abs_m2)

    def _prefilter(self, xyz, t):
        xyz, t = range_filter(xyz, t, self.cfg.min_range_m, self.cfg.max_range_m)
        return xyz, t

    def _initialize(self, t_k, xyz, imu):
        # the first LiDAR frame defines the global frame
        rot0 = self.ext.rot.T
        pos0 = -rot0 @ self.ext.trans
        g = initialize_gravity(imu, rot0, self.cfg.gravity_init_window_s, self.cfg.gravity_m_s2)
        self.state = FilterState(rot=rot0, pos=pos0, gravity=g)
        self.cov = self.cfg.initial_cov()
        xyz, _ = voxel_downsample(xyz, np.zeros(len(xyz)), self.cfg.downsample_leaf_m)
        means, covs = self._fit(xyz)
        self.map = init_map(means, covs, self.cfg.voxel_size_m)
        self.t = t_k
        return len(means)

    def process(self, index: int, t_k: float, xyz, t_pts, imu: list[ImuSample]):
        """Process one scan ending at ``t_k``.

        ``imu`` must contain the samples up to ``t_k`` including the last one
        at or before the previous scan end.
        """
        try:
            return self._process(index, t_k, xyz, t_pts, imu)
        except LioGvmError as err:
            raise ScanError(index, t_k, err) from err

    def _process(self, index, t_k, xyz, t_pts, imu):
        start = time.perf_counter()
        xyz, t_pts = self._prefilter(np.asarray(xyz, float), np.asarray(t_pts, float))
        if self.state is None:
            if not imu:
                raise ImuCoverageError("no IMU samples before the first scan")
            n_dist = self._initialize(t_k, xyz, imu)
            total = (time.perf_counter() - start) * 1e3
            self.trajectory.append((t_k, self.state.rot.copy(), self.state.pos.copy()))
            self.metrics.append(ScanMetrics(index, t_k, len(xyz), n_dist, 0, 0, False,
                                            0.0, 0.0, 0.0, total))
            return self.metrics[-1]

        pred = propagate(self.state, self.cov, imu, t_k, self.noise, t_start=self.t,
                         max_gap=self.cfg.max_imu_gap_s)
        t0 = time.perf_counter()
        pts = deskew(xyz, t_pts, pred.pose_cache, self.ext)
        pts, _ = voxel_downsample(pts, np.zeros(len(pts)), self.cfg.downsample_leaf_m)
        means, covs = self._fit(pts)
        t1 = time.perf_counter()
        res = iterated_update(pred, means, covs, self.map, self.ext, self.ieskf_cfg)
        t2 = time.perf_counter()
        mu, C = project_distributions(res.state, self.ext, means, covs)
        update_map(self.map, voxelize_scan(mu, C, self.cfg.voxel_size_m))
        t3 = time.perf_counter()

        self.state, self.cov, self.t = res.state, res.cov, t_k
        self.trajectory.append((t_k, self.state.rot.copy(), self.state.pos.copy()))
        m = ScanMetrics(
            index, t_k, len(xyz), len(means), res.correspondence_count, res.iterations_used,
            res.degenerate, (t1 - t0) * 1e3, (t2 - t1) * 1e3, (t3 - t2) * 1e3,
            (t3 - start) * 1e3,
        )
        self.metrics.append(m)
        return m

    def poses(self) -> np.ndarray:
        T = np.tile(np.eye(4), (len(self.trajectory), 1, 1))
        for i, (_, R, p) in enumerate(self.trajectory):
            T[i, :3, :3] = R
            T[i, :3, 3] = p
        return T


def run_sequence(cfg: PipelineConfig, imu: list[ImuSample], scans) -> Odometry:
    """Run the odometry over in-memory data; ``scans`` yields (t_end, xyz, t)."""
    odo = Odometry(cfg)
    times = np.array([s.t for s in imu])
    for k, (t_end, xyz, t_pts) in enumerate(scans):
        hi = int(np.searchsorted(times, t_end, side="right"))
        if odo.t is None:
            buf = imu[:hi]
        else:
            lo = max(int(np.searchsorted(times, odo.t, side="right")) - 1, 0)
            buf = imu[lo:hi]
        odo.process(k, t_end, xyz, t_pts, buf)
    return odo

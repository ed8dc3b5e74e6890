"""Synthetic planar worlds, IMU/LiDAR streams with ground truth, and the
KITTI-style relative pose error metric."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientOverlap, InvalidSpec
from .imu import ImuSample
from .lidar import Extrinsic
from .manifold import exp_so3, exp_so3_batch, skew

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class Patch:
    """Rectangle ``corner + a * edge1 + b * edge2`` for ``a, b`` in [0, 1]."""

    corner: np.ndarray
    edge1: np.ndarray
    edge2: np.ndarray
    density: float = 1.0

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge1, self.edge2)))

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.edge1, self.edge2)
        return n / np.linalg.norm(n)


@dataclass
class WorldSpec:
    patches: list[Patch]
    seed: int = 0


@dataclass
class Segment:
    duration: float
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    acc: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class TrajectorySpec:
    """Piecewise-constant body rates and body-frame accelerations.

    Noise values are continuous-time densities; the discrete white-noise
    standard deviation is ``density * sqrt(imu_rate)``.
    """

    segments: list[Segment]
    start_rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    start_pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    start_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    imu_rate: float = 200.0
    scan_rate: float = 10.0
    points_per_scan: int = 2000
    gyro_noise: float = 0.0
    acc_noise: float = 0.0
    gyro_bias_walk: float = 0.0
    acc_bias_walk: float = 0.0
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    acc_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    extrinsic: Extrinsic = field(default_factory=Extrinsic)
    min_range: float = 0.5
    max_range: float = 150.0
    seed: int = 0

    @property
    def duration(self) -> float:
        return float(sum(s.duration for s in self.segments))


@dataclass
class GroundTruth:
    t: np.ndarray
    rot: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    scan_times: np.ndarray
    scan_rot: np.ndarray
    scan_pos: np.ndarray

    def scan_poses(self) -> np.ndarray:
        return make_poses(self.scan_rot, self.scan_pos)


@dataclass
class Scan:
    t_end: float
    xyz: np.ndarray
    t: np.ndarray


@dataclass
class SimData:
    imu: list[ImuSample]
    scans: list[Scan]
    gt: GroundTruth
    extrinsic: Extrinsic


def make_poses(rot, pos) -> np.ndarray:
    T = np.tile(np.eye(4), (len(pos), 1, 1))
    T[:, :3, :3] = rot
    T[:, :3, 3] = pos
    return T


def box_room(size=(10.0, 10.0, 3.0), origin=(-5.0, -5.0, -1.5), density=1.0):
    """Six inward-facing rectangles bounding an axis-aligned box."""
    sx, sy, sz = size
    o = np.asarray(origin, dtype=float)
    ex, ey, ez = np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]), np.array([0, 0, sz])
    return [
        Patch(o, ex, ey, density),
        Patch(o + ez, ex, ey, density),
        Patch(o, ey, ez, density),
        Patch(o + ex, ey, ez, density),
        Patch(o, ex, ez, density),
        Patch(o + ey, ex, ez, density),
    ]


def default_world(seed: int = 0) -> WorldSpec:
    return WorldSpec(box_room(), seed)


def aliased_world(gap: float = 1.0, x0: float = 3.3, dense: float = 4.0,
                  sparse: float = 0.25, seed: int = 0) -> WorldSpec:
    """Default room plus two parallel full-height panels ``gap`` apart.

    With ``gap`` equal to the voxel size every panel voxel has a face
    neighbour on the other panel.  The panels are sampled at different
    densities (a solid wall next to a sparse mesh), so the fitted
    covariances differ in scale across the two panels.
    """
    half = 2.0
    patches = box_room()
    for x, dens in ((x0, dense), (x0 + gap, sparse)):
        o = np.array([x, -half, -1.5])
        patches.append(Patch(o, np.array([0.0, 2 * half, 0.0]), np.array([0.0, 0.0, 3.0]), dens))
    return WorldSpec(patches, seed)


def default_trajectory(duration: float = 30.0, noisy: bool = False, seed: int = 0,
                       points_per_scan: int = 5000) -> TrajectorySpec:
    """Rest, speed up, then circle the default room's centre with wobbling
    yaw rate, pitch and height; about 1 m/s, starting at rest.

    The rest and speed-up phases always run, so the shortest trajectory
    lasts 3 s whatever ``duration`` asks for.
    """
    rng = np.random.default_rng(seed + 1000)
    speed, radius = 1.0, 2.5
    segs = [Segment(1.0), Segment(2.0, acc=np.array([speed / 2.0, 0.0, 0.0]))]
    t = 3.0
    k = 0
    pitch_pattern = (0.04, -0.04, -0.04, 0.04)
    heave_pattern = (0.05, -0.05, -0.05, 0.05)
    while t < duration - 1e-9:
        d = min(2.0, duration - t)
        yaw_rate = speed / radius * (1.0 + rng.uniform(-0.2, 0.2))
        segs.append(Segment(
            d,
            omega=np.array([0.0, pitch_pattern[k % 4], yaw_rate]),
            acc=np.array([0.0, yaw_rate * speed, heave_pattern[k % 4]]),
        ))
        t += d
        k += 1
    spec = TrajectorySpec(
        segments=segs,
        start_pos=np.array([-0.5, -radius + 0.5, 0.0]),
        points_per_scan=points_per_scan,
        extrinsic=Extrinsic(exp_so3([0.0, 0.0, 0.05]), np.array([0.05, 0.0, 0.1])),
        seed=seed,
    )
    if noisy:
        spec.gyro_noise = 0.01
        spec.acc_noise = 0.1
        spec.gyro_bias_walk = 1e-4
        spec.acc_bias_walk = 1e-3
    return spec


def constant_velocity_trajectory(duration: float = 2.0, seed: int = 0,
                                 points_per_scan: int = 2000) -> TrajectorySpec:
    """Constant world velocity with body rates switching every 0.25 s.

    Segment boundaries fall on the IMU sample grid, so a zero-order hold of
    the samples reproduces the motion exactly.
    """
    rng = np.random.default_rng(seed + 2000)
    n = int(round(duration / 0.25))
    segs = [Segment(0.25, omega=rng.uniform(-0.6, 0.6, 3)) for _ in range(n)]
    return TrajectorySpec(
        segments=segs,
        start_vel=np.array([0.8, 0.3, -0.1]),
        points_per_scan=points_per_scan,
        extrinsic=Extrinsic(exp_so3([0.0, 0.0, 0.05]), np.array([0.05, 0.0, 0.1])),
        seed=seed,
    )


def _gamma_coeffs(omega, s):
    """Coefficients of ``int_0^s Exp(omega tau) dtau = s I + c1 K + c2 K^2`` and
    ``int_0^s (s - tau) Exp(omega tau) dtau = s^2/2 I + a K + b K^2``, where
    ``K`` is the cross-product matrix of the unit rotation axis."""
    s = np.asarray(s, dtype=float)
    theta = np.linalg.norm(omega)
    if theta == 0.0:
        z = np.zeros_like(s)
        return z, z, z, z
    ts = theta * s
    small = ts < 1e-3
    tsafe = np.where(small, 1.0, ts)
    c1 = np.where(small, theta * s**2 / 2 - theta**3 * s**4 / 24,
                  (1 - np.cos(tsafe)) / theta)
    c2 = np.where(small, theta**2 * s**3 / 6 - theta**4 * s**5 / 120,
                  s - np.sin(tsafe) / theta)
    a = np.where(small, theta * s**3 / 6 - theta**3 * s**5 / 120,
                 (tsafe - np.sin(tsafe)) / theta**2)
    b = np.where(small, theta**2 * s**4 / 24 - theta**4 * s**6 / 720,
                 s**2 / 2 - (1 - np.cos(tsafe)) / theta**2)
    return c1, c2, a, b


class TrajectoryModel:
    """Closed-form evaluation of a piecewise-constant-rate trajectory."""

    def __init__(self, spec: TrajectorySpec, gravity=GRAVITY):
        if not spec.segments:
            raise InvalidSpec("trajectory has no segments")
        for s in spec.segments:
            if not s.duration > 0:
                raise InvalidSpec("segment durations must be positive")
        if not (spec.imu_rate > 0 and spec.scan_rate > 0):
            raise InvalidSpec("rates must be positive")
        self.spec = spec
        self.gravity = np.asarray(gravity, dtype=float)
        self.starts = np.concatenate([[0.0], np.cumsum([s.duration for s in spec.segments])])
        R, p, v = (np.array(spec.start_rot, float), np.array(spec.start_pos, float),
                   np.array(spec.start_vel, float))
        self._init = []
        for seg in spec.segments:
            self._init.append((R, p, v))
            R, p, v = self._advance(R, p, v, seg, seg.duration)

    @property
    def duration(self):
        return self.starts[-1]

    @staticmethod
    def _advance(R, p, v, seg, s):
        omega = np.asarray(seg.omega, float)
        acc = np.asarray(seg.acc, float)
        c1, c2, a, b = (float(c) for c in _gamma_coeffs(omega, np.array(s)))
        theta = np.linalg.norm(omega)
        K = skew(omega / theta) if theta > 0 else np.zeros((3, 3))
        Ka, K2a = K @ acc, K @ K @ acc
        return (
            R @ exp_so3(omega * s),
            p + v * s + R @ (0.5 * s**2 * acc + a * Ka + b * K2a),
            v + R @ (s * acc + c1 * Ka + c2 * K2a),
        )

    def segment_index(self, t):
        i = int(np.searchsorted(self.starts, t, side="right")) - 1
        return min(max(i, 0), len(self.spec.segments) - 1)

    def state(self, t):
        i = self.segment_index(t)
        R, p, v = self._init[i]
        return self._advance(R, p, v, self.spec.segments[i], t - self.starts[i])

    def states(self, ts):
        """Vectorised ``state`` for an array of times."""
        ts = np.asarray(ts, dtype=float)
        rot = np.empty((len(ts), 3, 3))
        pos = np.empty((len(ts), 3))
        vel = np.empty((len(ts), 3))
        seg_idx = np.clip(np.searchsorted(self.starts, ts, side="right") - 1, 0,
                          len(self.spec.segments) - 1)
        for i in np.unique(seg_idx):
            sel = seg_idx == i
            seg = self.spec.segments[i]
            R0, p0, v0 = self._init[i]
            s = ts[sel] - self.starts[i]
            omega = np.asarray(seg.omega, float)
            acc = np.asarray(seg.acc, float)
            c1, c2, a, b = _gamma_coeffs(omega, s)
            theta = np.linalg.norm(omega)
            if theta > 0:
                K = skew(omega / theta)
            else:
                K = np.zeros((3, 3))
            Ka, K2a = K @ acc, K @ K @ acc
            dv = s[:, None] * acc + c1[:, None] * Ka + c2[:, None] * K2a
            dp = (0.5 * s**2)[:, None] * acc + a[:, None] * Ka + b[:, None] * K2a
            rot[sel] = R0 @ exp_so3_batch(omega[None, :] * s[:, None])
            vel[sel] = v0 + dv @ R0.T
            pos[sel] = p0 + v0 * s[:, None] + dp @ R0.T
        return rot, pos, vel

    def imu_truth(self, t, R=None):
        """Exact body rate and specific force at time ``t``."""
        i = self.segment_index(t)
        seg = self.spec.segments[i]
        if R is None:
            R, _, _ = self.state(t)
        return np.asarray(seg.omega, float).copy(), np.asarray(seg.acc, float) - R.T @ self.gravity


def synthesize(world: WorldSpec, traj: TrajectorySpec, gravity=GRAVITY) -> SimData:
    """Generate IMU samples, motion-distorted scans and ground truth.

    IMU samples sit on the grid ``i / imu_rate``; scan ``k`` ends at
    ``k / scan_rate`` (k >= 1) and its points carry timestamps drawn uniformly
    over the preceding scan period.
    """
    if not world.patches:
        raise InvalidSpec("world has no patches")
    for pt in world.patches:
        if pt.area <= 0 or pt.density <= 0:
            raise InvalidSpec("patches need positive area and density")
    model = TrajectoryModel(traj, gravity)
    rng = np.random.default_rng([world.seed, traj.seed])

    n_imu = int(np.floor(model.duration * traj.imu_rate + 1e-9)) + 1
    times = np.arange(n_imu) / traj.imu_rate
    sd_g = traj.gyro_noise * np.sqrt(traj.imu_rate)
    sd_a = traj.acc_noise * np.sqrt(traj.imu_rate)
    dt = 1.0 / traj.imu_rate
    bg = np.array(traj.gyro_bias, float)
    ba = np.array(traj.acc_bias, float)
    imu = []
    gt_rot, gt_pos, gt_vel = model.states(times)
    for i, t in enumerate(times):
        w, a = model.imu_truth(t, gt_rot[i])
        gyro = w + bg
        acc = a + ba
        if sd_g > 0:
            gyro = gyro + sd_g * rng.standard_normal(3)
        if sd_a > 0:
            acc = acc + sd_a * rng.standard_normal(3)
        imu.append(ImuSample(float(t), gyro, acc))
        if traj.gyro_bias_walk > 0:
            bg = bg + traj.gyro_bias_walk * np.sqrt(dt) * rng.standard_normal(3)
        if traj.acc_bias_walk > 0:
            ba = ba + traj.acc_bias_walk * np.sqrt(dt) * rng.standard_normal(3)

    ext = traj.extrinsic
    period = 1.0 / traj.scan_rate
    n_scans = int(np.floor(model.duration * traj.scan_rate + 1e-9))
    weights = np.array([p.area * p.density for p in world.patches])
    weights /= weights.sum()
    scans = []
    scan_times = np.arange(1, n_scans + 1) * period
    scan_rot = np.empty((n_scans, 3, 3))
    scan_pos = np.empty((n_scans, 3))
    for k, t_end in enumerate(scan_times):
        scan_rot[k], scan_pos[k], _ = model.state(float(t_end))
        xyz, ts = _sample_scan(world, weights, model, ext, t_end - period, t_end,
                               traj.points_per_scan, traj.min_range, traj.max_range, rng)
        scans.append(Scan(float(t_end), xyz, ts))
    gt = GroundTruth(times, gt_rot, gt_pos, gt_vel, scan_times, scan_rot, scan_pos)
    return SimData(imu, scans, gt, ext)


def _sample_scan(world, weights, model, ext, t0, t1, n, min_range, max_range, rng):
    ts = np.sort(rng.uniform(t0, t1, size=n))
    which = rng.choice(len(world.patches), size=n, p=weights)
    ab = rng.uniform(0.0, 1.0, size=(n, 2))
    corners = np.array([world.patches[i].corner for i in which])
    e1 = np.array([world.patches[i].edge1 for i in which])
    e2 = np.array([world.patches[i].edge2 for i in which])
    pw = corners + ab[:, :1] * e1 + ab[:, 1:] * e2
    R, p, _ = model.states(ts)
    # p_L = R_IL^T (R^T (p_w - p) - t_IL)
    q_I = np.einsum("nji,nj->ni", R, pw - p)
    xyz = (q_I - ext.trans) @ ext.rot
    r = np.linalg.norm(xyz, axis=1)
    keep = (r >= min_range) & (r <= max_range)
    return xyz[keep], ts[keep]


def scan_points_world(data_scan: Scan, model: TrajectoryModel, ext: Extrinsic):
    """Map each point back to the world with its own timestamp's pose."""
    R, p, _ = model.states(data_scan.t)
    return np.einsum("nij,nj->ni", R, ext.apply(data_scan.xyz)) + p


# -- evaluation ---------------------------------------------------------------

SEGMENT_LENGTHS = (10.0, 20.0, 50.0)


def path_distances(poses) -> np.ndarray:
    steps = np.linalg.norm(np.diff(poses[:, :3, 3], axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def frame_pairs(gt_poses, lengths=SEGMENT_LENGTHS):
    """(i, j, length) triples: every start frame, first j at least ``length`` on."""
    dist = path_distances(gt_poses)
    total = dist[-1]
    pairs = []
    for length in lengths:
        if length > total:
            continue
        for i in range(len(dist)):
            j = int(np.searchsorted(dist, dist[i] + length, side="left"))
            if j >= len(dist):
                break
            pairs.append((i, j, length))
    return pairs


def _rot_angle(R):
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def relative_errors(est_poses, gt_poses, pairs):
    """Per-pair (translation error / length, rotation error / length)."""
    t_err = np.empty(len(pairs))
    r_err = np.empty(len(pairs))
    for n, (i, j, length) in enumerate(pairs):
        d_est = np.linalg.inv(est_poses[i]) @ est_poses[j]
        d_gt = np.linalg.inv(gt_poses[i]) @ gt_poses[j]
        E = np.linalg.inv(d_est) @ d_gt
        t_err[n] = np.linalg.norm(E[:3, 3]) / length
        r_err[n] = _rot_angle(E[:3, :3]) / length
    return t_err, r_err


def evaluate_ate_are(est_poses, gt_poses, pairs=None, lengths=SEGMENT_LENGTHS):
    """Average translation error [%] and rotation error [deg / 10 m].

    ``est_poses`` and ``gt_poses`` are time-aligned (N, 4, 4) arrays.
    """
    est_poses = np.asarray(est_poses, dtype=float)
    gt_poses = np.asarray(gt_poses, dtype=float)
    if est_poses.shape != gt_poses.shape:
        raise InsufficientOverlap("estimate and ground truth differ in length")
    if pairs is None:
        pairs = frame_pairs(gt_poses, lengths)
    if not pairs:
        raise InsufficientOverlap("no frame pair spans the requested path lengths")
    t_err, r_err = relative_errors(est_poses, gt_poses, pairs)
    return 100.0 * float(t_err.mean()), float(np.degrees(r_err.mean()) * 10.0)

"""IMU-driven prediction of the nominal state, error state and covariance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyImuBuffer, ImuCoverageError, NonMonotonicTimestamps
from .manifold import (
    BA,
    BG,
    GRAV,
    POS,
    ROT,
    STATE_DIM,
    VEL,
    FilterState,
    boxplus,
    exp_so3,
    left_jacobian,
    skew,
)

NOISE_DIM = 12


@dataclass
class ImuSample:
    t: float
    gyro: np.ndarray
    acc: np.ndarray


@dataclass
class NoiseParams:
    """Continuous-time noise densities per axis.

    ``std_gyro`` [rad/s/sqrt(Hz)], ``std_acc`` [m/s^2/sqrt(Hz)] and the bias
    random-walk densities ``std_bias_gyro``, ``std_bias_acc``.
    """

    std_gyro: np.ndarray
    std_acc: np.ndarray
    std_bias_gyro: np.ndarray
    std_bias_acc: np.ndarray

    def __post_init__(self):
        for name in ("std_gyro", "std_acc", "std_bias_gyro", "std_bias_acc"):
            val = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (3,)).copy()
            if not np.all(val > 0):
                raise ValueError(f"{name} must be strictly positive")
            setattr(self, name, val)

    def density_matrix(self) -> np.ndarray:
        return np.diag(
            np.concatenate(
                [self.std_gyro, self.std_acc, self.std_bias_gyro, self.std_bias_acc]
            )
            ** 2
        )

    def covariance(self, dt: float) -> np.ndarray:
        """Covariance W of one held noise sample over an interval ``dt``."""
        return self.density_matrix() / dt


@dataclass
class PoseCache:
    """Nominal IMU poses at every propagation knot of one scan interval.

    ``omega`` (bias-corrected body rate) and ``acc`` (world-frame acceleration)
    are the inputs held constant from knot ``i`` to knot ``i + 1``.
    """

    t: np.ndarray
    rot: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    omega: np.ndarray
    acc: np.ndarray

    def __len__(self):
        return len(self.t)


@dataclass
class PropagationResult:
    state: FilterState
    cov: np.ndarray
    pose_cache: PoseCache


def kinematics_f(x: FilterState, u: ImuSample, w, dt: float) -> np.ndarray:
    """Discrete kinematics increment, in error-state block order."""
    w = np.zeros(NOISE_DIM) if w is None else np.asarray(w, dtype=float)
    out = np.zeros(STATE_DIM)
    out[ROT] = u.gyro - x.bias_gyro - w[0:3]
    out[POS] = x.vel
    out[VEL] = x.rot @ (u.acc - x.bias_acc - w[3:6]) + x.gravity
    out[BG] = w[6:9]
    out[BA] = w[9:12]
    return dt * out


def _apply_increment(x: FilterState, f: np.ndarray) -> FilterState:
    # The gyro integrates in the body frame: R' = R Exp(f_r) = Exp(R f_r) R.
    g = f.copy()
    g[ROT] = x.rot @ f[ROT]
    return boxplus(x, g)


def predict_nominal(x: FilterState, u: ImuSample, dt: float) -> FilterState:
    return _apply_increment(x, kinematics_f(x, u, None, dt))


def predict_with_noise(x: FilterState, u: ImuSample, w, dt: float) -> FilterState:
    return _apply_increment(x, kinematics_f(x, u, w, dt))


def error_transition(x: FilterState, u: ImuSample, dt: float):
    """Jacobians ``(F_dx, F_w)`` of the one-step error-state map."""
    omega = u.gyro - x.bias_gyro
    acc = u.acc - x.bias_acc
    R = x.rot
    RA = R @ left_jacobian(omega * dt) * dt
    I3 = np.eye(3)

    F_dx = np.eye(STATE_DIM)
    F_dx[ROT, BG] = -RA
    F_dx[POS, VEL] = dt * I3
    F_dx[VEL, ROT] = -skew(R @ acc) * dt
    F_dx[VEL, BA] = -R * dt
    F_dx[VEL, GRAV] = dt * I3

    F_w = np.zeros((STATE_DIM, NOISE_DIM))
    F_w[ROT, 0:3] = -RA
    F_w[VEL, 3:6] = -R * dt
    F_w[BG, 6:9] = dt * I3
    F_w[BA, 9:12] = dt * I3
    return F_dx, F_w


def predict_covariance(P, F_dx, F_w, W) -> np.ndarray:
    P_new = F_dx @ P @ F_dx.T + F_w @ W @ F_w.T
    return 0.5 * (P_new + P_new.T)


def propagate(
    prev: FilterState,
    prev_cov: np.ndarray,
    imu: list[ImuSample],
    t_k: float,
    noise: NoiseParams,
    t_start: float | None = None,
    max_gap: float | None = None,
) -> PropagationResult:
    """Propagate from ``t_start`` (default: first sample time) to ``t_k``.

    Each sample's reading is held from its timestamp until the next knot.
    The buffer must contain a sample at or before ``t_start``; samples after
    ``t_k`` are ignored.
    """
    if not imu:
        raise EmptyImuBuffer("IMU buffer is empty")
    times = np.array([s.t for s in imu])
    if np.any(np.diff(times) <= 0):
        raise NonMonotonicTimestamps("IMU timestamps must be strictly increasing")
    if t_start is None:
        t_start = times[0]
    if times[0] > t_start:
        raise ImuCoverageError(
            f"first IMU sample at {times[0]:.6f} is after interval start {t_start:.6f}"
        )
    if t_k < t_start:
        raise ImuCoverageError(f"scan end {t_k:.6f} precedes interval start {t_start:.6f}")

    first = int(np.searchsorted(times, t_start, side="right")) - 1
    last = int(np.searchsorted(times, t_k, side="left"))
    inner = [imu[i] for i in range(first + 1, last)]
    knots = [t_start] + [s.t for s in inner] + [t_k]
    inputs = [imu[first]] + inner
    if max_gap is not None:
        gaps = np.diff(np.concatenate([[times[first]], knots[1:]]))
        if len(gaps) and gaps.max() > max_gap:
            raise ImuCoverageError(
                f"IMU gap of {gaps.max():.4f} s exceeds {max_gap:.4f} s before {t_k:.6f}"
            )

    x = prev.copy()
    P = np.array(prev_cov, dtype=float)
    n = len(knots)
    cache = PoseCache(
        t=np.array(knots, dtype=float),
        rot=np.empty((n, 3, 3)),
        pos=np.empty((n, 3)),
        vel=np.empty((n, 3)),
        omega=np.empty((n, 3)),
        acc=np.empty((n, 3)),
    )
    for i, u in enumerate(inputs):
        cache.rot[i], cache.pos[i], cache.vel[i] = x.rot, x.pos, x.vel
        cache.omega[i] = u.gyro - x.bias_gyro
        cache.acc[i] = x.rot @ (u.acc - x.bias_acc) + x.gravity
        dt = knots[i + 1] - knots[i]
        if dt <= 0.0:
            continue
        F_dx, F_w = error_transition(x, u, dt)
        P = predict_covariance(P, F_dx, F_w, noise.covariance(dt))
        x = predict_nominal(x, u, dt)
    cache.rot[-1], cache.pos[-1], cache.vel[-1] = x.rot, x.pos, x.vel
    cache.omega[-1] = cache.omega[-2] if n > 1 else 0.0
    cache.acc[-1] = cache.acc[-2] if n > 1 else 0.0
    return PropagationResult(x, P, cache)


def initialize_gravity(samples: list[ImuSample], rot0=None, window: float = 0.5,
                       magnitude: float = 9.81) -> np.ndarray:
    """Gravity in the global frame from the mean specific force while static."""
    if not samples:
        raise EmptyImuBuffer("no IMU samples for gravity initialisation")
    rot0 = np.eye(3) if rot0 is None else rot0
    t0 = samples[0].t
    acc = np.array([s.acc for s in samples if s.t - t0 <= window])
    mean = acc.mean(axis=0)
    g = -rot0 @ mean
    return g / np.linalg.norm(g) * magnitude

"""Scan deskewing and per-point Gaussian fitting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import TimestampOutOfCache, TooFewPoints
from .imu import PoseCache
from .manifold import exp_so3_batch


@dataclass
class RawPoint:
    xyz: np.ndarray
    t: float


@dataclass
class PointDistribution:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class Extrinsic:
    """LiDAR pose in the IMU frame: ``p_I = rot @ p_L + trans``."""

    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, pts):
        return pts @ self.rot.T + self.trans

    def apply_inverse(self, pts):
        return (pts - self.trans) @ self.rot


def points_to_arrays(points: list[RawPoint]):
    if not points:
        return np.zeros((0, 3)), np.zeros(0)
    return np.array([p.xyz for p in points], dtype=float), np.array([p.t for p in points])


def range_filter(xyz, t, min_range=0.5, max_range=150.0):
    r = np.linalg.norm(xyz, axis=1)
    keep = (r >= min_range) & (r <= max_range) & np.all(np.isfinite(xyz), axis=1)
    return xyz[keep], t[keep]


def voxel_downsample(xyz, t, leaf: float):
    """Keep the first point (in input order) of every occupied leaf cell."""
    if leaf <= 0 or len(xyz) == 0:
        return xyz, t
    keys = np.floor(xyz / leaf).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return xyz[first], t[first]


def deskew(xyz, t, cache: PoseCache, ext: Extrinsic, tol: float = 1e-9):
    """Express points stamped at ``t`` in the LiDAR frame at the cache end time.

    Within a cache interval the pose is advanced from the interval's start
    knot with the held body rate and the knot velocity, the same update the
    propagation uses, so the interpolant is continuous at every knot.
    """
    xyz = np.asarray(xyz, dtype=float)
    t = np.asarray(t, dtype=float)
    if len(t) == 0:
        return xyz.copy()
    t0, t_end = cache.t[0], cache.t[-1]
    if t.min() < t0 - tol or t.max() > t_end + tol:
        bad = t[(t < t0 - tol) | (t > t_end + tol)][0]
        raise TimestampOutOfCache(
            f"point time {bad:.6f} outside pose cache [{t0:.6f}, {t_end:.6f}]"
        )
    tc = np.clip(t, t0, t_end)
    idx = np.clip(np.searchsorted(cache.t, tc, side="right") - 1, 0, len(cache) - 1)
    s = tc - cache.t[idx]
    R_j = cache.rot[idx] @ exp_so3_batch(cache.omega[idx] * s[:, None])
    p_j = cache.pos[idx] + cache.vel[idx] * s[:, None]
    # exact at knots, so the end pose is the cache's last entry
    R_k, p_k = cache.rot[-1], cache.pos[-1]
    q_I = ext.apply(xyz)
    world = np.einsum("nij,nj->ni", R_j, q_I) + p_j
    q_Ik = (world - p_k) @ R_k
    return ext.apply_inverse(q_Ik)


def regularize_covariance(C, kappa: float = 1e-3, abs_floor: float = 1e-6):
    """Floor eigenvalues at ``kappa * lambda_max`` (``abs_floor * I`` if C == 0)."""
    C = np.asarray(C, dtype=float)
    batch = C.reshape(-1, 3, 3)
    sym = 0.5 * (batch + np.swapaxes(batch, 1, 2))
    lam, V = np.linalg.eigh(sym)
    lam_max = lam[:, -1]
    floor = (kappa * lam_max)[:, None]
    lam = np.maximum(lam, floor)
    out = (V * lam[:, None, :]) @ np.swapaxes(V, -1, -2)
    out = 0.5 * (out + np.swapaxes(out, 1, 2))
    degenerate = lam_max <= 0.0
    if np.any(degenerate):
        out[degenerate] = abs_floor * np.eye(3)
    return out.reshape(C.shape)


def fit_raw(points, neighbors: int = 10, tree: cKDTree | None = None):
    """Unregularised means and covariances of each point's neighbourhood.

    The neighbourhood is the ``neighbors`` nearest points including the query
    point itself; the covariance divisor is ``neighbors - 1``.
    """
    points = np.asarray(points, dtype=float)
    if neighbors < 2:
        raise ValueError("need at least two neighbours")
    if len(points) < neighbors + 1:
        raise TooFewPoints(f"{len(points)} points, need at least {neighbors + 1}")
    tree = cKDTree(points) if tree is None else tree
    _, nn = tree.query(points, k=neighbors)
    nbr = points[nn]
    mean = nbr.mean(axis=1)
    A = nbr - mean[:, None, :]
    cov = (np.swapaxes(A, -1, -2) @ A) / (neighbors - 1)
    return mean, cov


def fit_distributions(points, neighbors: int = 10, kappa: float = 1e-3,
                      abs_floor: float = 1e-6):
    """Fit a regularised Gaussian to every point's neighbourhood.

    Returns ``(means, covs)`` arrays of shape (N, 3) and (N, 3, 3).
    """
    mean, cov = fit_raw(points, neighbors)
    return mean, regularize_covariance(cov, kappa, abs_floor)


def as_distributions(means, covs) -> list[PointDistribution]:
    return [PointDistribution(m, c) for m, c in zip(means, covs)]

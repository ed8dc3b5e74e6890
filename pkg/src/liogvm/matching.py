"""Correspondence search, similarity gating and the whitened residual model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDeterminant, SingularSum
from .gvm import FACE7, NEIGHBOR_OFFSETS, GaussianVoxelMap, VoxelCell, unique_keys, voxel_keys
from .lidar import Extrinsic, PointDistribution
from .manifold import STATE_DIM, FilterState, skew


@dataclass
class MeasurementNoise:
    v: float = 1e-3

    def __post_init__(self):
        if not self.v > 0:
            raise ValueError("measurement variance must be positive")


@dataclass
class Correspondence:
    src_index: int
    cell: VoxelCell
    similarity: float
    whitening: np.ndarray
    proj_mean: np.ndarray
    proj_cov: np.ndarray


@dataclass
class CorrespondenceSet:
    """Structure-of-arrays view of matched pairs (one row per pair)."""

    src_index: np.ndarray
    cell_row: np.ndarray
    similarity: np.ndarray
    whitening: np.ndarray
    proj_mean: np.ndarray
    proj_cov: np.ndarray
    cell_mean: np.ndarray
    cell_cov: np.ndarray

    def __len__(self):
        return len(self.src_index)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i) -> Correspondence:
        cell = VoxelCell(self.cell_mean[i], self.cell_cov[i], 0)
        return Correspondence(
            int(self.src_index[i]),
            cell,
            float(self.similarity[i]),
            self.whitening[i],
            self.proj_mean[i],
            self.proj_cov[i],
        )

    @classmethod
    def empty(cls):
        return cls(
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0),
            np.zeros((0, 3, 3)),
            np.zeros((0, 3)),
            np.zeros((0, 3, 3)),
            np.zeros((0, 3)),
            np.zeros((0, 3, 3)),
        )


def lidar_pose(x: FilterState, ext: Extrinsic):
    """Rotation and translation of the LiDAR frame in the global frame."""
    return x.rot @ ext.rot, x.rot @ ext.trans + x.pos


def project_distribution(x: FilterState, ext: Extrinsic, d: PointDistribution):
    R, t = lidar_pose(x, ext)
    return R @ d.mean + t, R @ d.cov @ R.T


def project_distributions(x: FilterState, ext: Extrinsic, means, covs):
    R, t = lidar_pose(x, ext)
    return means @ R.T + t, R @ covs @ R.T


def _det3(M):
    """Closed-form determinant of stacked 3x3 matrices."""
    return (
        M[..., 0, 0] * (M[..., 1, 1] * M[..., 2, 2] - M[..., 1, 2] * M[..., 2, 1])
        - M[..., 0, 1] * (M[..., 1, 0] * M[..., 2, 2] - M[..., 1, 2] * M[..., 2, 0])
        + M[..., 0, 2] * (M[..., 1, 0] * M[..., 2, 1] - M[..., 1, 1] * M[..., 2, 0])
    )


def similarity_batch(Cj, Ci):
    """Hellinger-derived similarity; broadcasts over leading axes."""
    Cj = np.asarray(Cj, dtype=float)
    Ci = np.asarray(Ci, dtype=float)
    dj = _det3(Cj)
    di = _det3(Ci)
    dm = _det3(0.5 * (Cj + Ci))
    return np.sqrt(np.sqrt(dj * di) / dm)


def similarity(Cj, Ci) -> float:
    """``sqrt( sqrt(det Cj det Ci) / det((Cj + Ci) / 2) )``, in (0, 1]."""
    dj, di = np.linalg.det(Cj), np.linalg.det(Ci)
    if dj <= 0 or di <= 0:
        raise NonPositiveDeterminant(f"determinants must be positive, got {dj:g}, {di:g}")
    return float(np.sqrt(np.sqrt(dj * di) / np.linalg.det(0.5 * (Cj + Ci))))


def whitening_batch(S, v: float):
    """``D = sqrt(v) Lambda^-1/2 U`` for each SPD sum ``S = U^T Lambda U``."""
    lam, W = np.linalg.eigh(S)
    if np.any(lam <= 0):
        raise SingularSum("covariance sum is not positive definite")
    return np.sqrt(v) * np.swapaxes(W, -1, -2) / np.sqrt(lam)[..., :, None]


def whitening(Cj_hat, Ci, noise: MeasurementNoise) -> np.ndarray:
    return whitening_batch(np.asarray(Cj_hat) + np.asarray(Ci), noise.v)


def match(
    proj_means,
    proj_covs,
    gmap: GaussianVoxelMap,
    s_t: float,
    mode: str = FACE7,
    noise: MeasurementNoise | None = None,
    keep_all: bool = False,
) -> CorrespondenceSet:
    """Find near-and-similar map voxels for each projected distribution.

    Candidates are the occupied voxels in the neighbour set of the voxel the
    mean falls in.  Pairs with similarity below ``s_t`` are discarded.  By
    default only the most similar survivor is kept (ties: nearest centroid,
    then neighbour order); ``keep_all`` keeps every survivor.
    """
    noise = noise or MeasurementNoise()
    proj_means = np.asarray(proj_means, dtype=float)
    proj_covs = np.asarray(proj_covs, dtype=float)
    n = len(proj_means)
    if n == 0 or len(gmap) == 0:
        return CorrespondenceSet.empty()
    offsets = NEIGHBOR_OFFSETS[mode]
    base = voxel_keys(proj_means, gmap.voxel_size)
    # many means share a voxel; look up each distinct voxel's neighbours once
    uniq, _, inverse = unique_keys(base)
    cand = (uniq[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    rows = gmap.lookup_rows(cand).reshape(len(uniq), len(offsets))[inverse]
    valid = rows >= 0
    src, slot = np.nonzero(valid)
    if len(src) == 0:
        return CorrespondenceSet.empty()
    cand_rows = rows[src, slot]
    s = similarity_batch(proj_covs[src], gmap.covs[cand_rows])
    ok = s >= s_t
    src, slot, cand_rows, s = src[ok], slot[ok], cand_rows[ok], s[ok]
    if len(src) == 0:
        return CorrespondenceSet.empty()

    if not keep_all:
        S = np.full((n, len(offsets)), -np.inf)
        S[src, slot] = s
        dist = np.full((n, len(offsets)), np.inf)
        dist[src, slot] = np.linalg.norm(gmap.centroids[cand_rows] - proj_means[src], axis=1)
        best = S.max(axis=1)
        tied = S >= best[:, None] - 1e-12
        pick = np.argmin(np.where(tied, dist, np.inf), axis=1)
        has = np.isfinite(best)
        src = np.flatnonzero(has)
        slot = pick[has]
        cand_rows = rows[src, slot]
        s = S[src, slot]

    cell_mean = gmap.centroids[cand_rows]
    cell_cov = gmap.covs[cand_rows]
    D = whitening_batch(proj_covs[src] + cell_cov, noise.v)
    return CorrespondenceSet(
        src_index=src,
        cell_row=cand_rows,
        similarity=s,
        whitening=D,
        proj_mean=proj_means[src],
        proj_cov=proj_covs[src],
        cell_mean=cell_mean.copy(),
        cell_cov=cell_cov.copy(),
    )


def residual(c: Correspondence) -> np.ndarray:
    return c.similarity * c.whitening @ (c.proj_mean - c.cell.centroid)


def residuals(cs: CorrespondenceSet) -> np.ndarray:
    """Stacked residuals, shape (m, 3)."""
    diff = cs.proj_mean - cs.cell_mean
    return cs.similarity[:, None] * np.einsum("nij,nj->ni", cs.whitening, diff)


def jacobian_row(c: Correspondence, x: FilterState, ext: Extrinsic, p_L) -> np.ndarray:
    """3x18 block of d residual / d error-state, with s*D held fixed."""
    sD = c.similarity * c.whitening
    q = ext.rot @ np.asarray(p_L, dtype=float) + ext.trans
    H = np.zeros((3, STATE_DIM))
    H[:, 0:3] = -sD @ skew(x.rot @ q)
    H[:, 3:6] = sD
    return H


def jacobian_rows(cs: CorrespondenceSet, x: FilterState, ext: Extrinsic, p_L) -> np.ndarray:
    """Stacked measurement Jacobian, shape (m, 3, 18)."""
    sD = cs.similarity[:, None, None] * cs.whitening
    g = (np.asarray(p_L) @ ext.rot.T + ext.trans) @ x.rot.T
    K = np.zeros((len(g), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -g[:, 2], g[:, 1]
    K[:, 1, 0], K[:, 1, 2] = g[:, 2], -g[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -g[:, 1], g[:, 0]
    H = np.zeros((len(g), 3, STATE_DIM))
    H[:, :, 0:3] = -sD @ K
    H[:, :, 3:6] = sD
    return H


def weighted_mahalanobis(cs: CorrespondenceSet) -> float:
    """Similarity-weighted Mahalanobis sum of the matched mean differences."""
    diff = cs.proj_mean - cs.cell_mean
    S = cs.proj_cov + cs.cell_cov
    sol = np.linalg.solve(S, diff[..., None])[..., 0]
    return float(np.sum(cs.similarity**2 * np.einsum("ni,ni->n", diff, sol)))

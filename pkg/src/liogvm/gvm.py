"""Gaussian voxel map: a hash table from integer voxel keys to Gaussians.

Cells live in growable numpy arrays; a ``dict`` maps each key tuple to its
row, so query, insert and merge are all O(1) per voxel and never delete.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import VoxelSizeMismatch

FACE7 = "face7"
FULL27 = "full27"

_FACE_OFFSETS = [
    (0, 0, 0),
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
]
_REST = sorted(
    (i, j, k)
    for i in (-1, 0, 1)
    for j in (-1, 0, 1)
    for k in (-1, 0, 1)
    if (i, j, k) not in _FACE_OFFSETS
)
NEIGHBOR_OFFSETS = {
    FACE7: np.array(_FACE_OFFSETS, dtype=np.int64),
    FULL27: np.array(_FACE_OFFSETS + _REST, dtype=np.int64),
}


@dataclass
class VoxelCell:
    centroid: np.ndarray
    cov: np.ndarray
    count: int


def voxel_key(p, r: float) -> tuple[int, int, int]:
    k = np.floor(np.asarray(p, dtype=float) / r).astype(np.int64)
    return int(k[0]), int(k[1]), int(k[2])


def voxel_keys(points, r: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / r).astype(np.int64)


_PACK_BITS = 21
_PACK_HALF = 1 << (_PACK_BITS - 1)


def unique_keys(keys):
    """``np.unique(keys, axis=0)`` with first indices and inverse.

    Keys are packed into one int64 when they fit, which avoids the slow
    lexicographic row sort.
    """
    keys = np.asarray(keys, dtype=np.int64)
    if len(keys) and np.abs(keys).max() < _PACK_HALF:
        k = keys + _PACK_HALF
        packed = (k[:, 0] << (2 * _PACK_BITS)) | (k[:, 1] << _PACK_BITS) | k[:, 2]
        _, first, inverse = np.unique(packed, return_index=True, return_inverse=True)
        return keys[first], first, inverse.reshape(-1)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    return uniq, first, inverse.reshape(-1)


def neighbor_keys(key, mode: str = FACE7) -> list[tuple[int, int, int]]:
    """Center first, then the six face neighbours, then (FULL27) the rest."""
    base = np.asarray(key, dtype=np.int64)
    return [tuple(int(c) for c in base + off) for off in NEIGHBOR_OFFSETS[mode]]


class GaussianVoxelMap:
    def __init__(self, voxel_size: float, capacity: int = 1024):
        if not voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.index: dict[tuple[int, int, int], int] = {}
        self._keys = np.empty((capacity, 3), dtype=np.int64)
        self._centroids = np.empty((capacity, 3))
        self._covs = np.empty((capacity, 3, 3))
        self._counts = np.empty(capacity, dtype=np.int64)

    def __len__(self):
        return len(self.index)

    def __contains__(self, key):
        return tuple(key) in self.index

    @property
    def keys(self):
        return self._keys[: len(self)]

    @property
    def centroids(self):
        return self._centroids[: len(self)]

    @property
    def covs(self):
        return self._covs[: len(self)]

    @property
    def counts(self):
        return self._counts[: len(self)]

    def _grow(self, needed):
        cap = len(self._counts)
        if needed <= cap:
            return
        new_cap = max(needed, 2 * cap)
        for name in ("_keys", "_centroids", "_covs", "_counts"):
            old = getattr(self, name)
            arr = np.empty((new_cap,) + old.shape[1:], dtype=old.dtype)
            arr[:cap] = old
            setattr(self, name, arr)

    def insert(self, key, centroid, cov, count: int):
        key = tuple(int(c) for c in key)
        row = self.index.get(key)
        if row is None:
            row = len(self)
            self._grow(row + 1)
            self.index[key] = row
            self._keys[row] = key
        self._centroids[row] = centroid
        self._covs[row] = cov
        self._counts[row] = count

    def query(self, key) -> VoxelCell | None:
        row = self.index.get(key if type(key) is tuple else tuple(key))
        if row is None:
            return None
        return VoxelCell(
            self._centroids[row].copy(), self._covs[row].copy(), int(self._counts[row])
        )

    def lookup_rows(self, keys: np.ndarray) -> np.ndarray:
        """Row index for each key in an (N, 3) array, -1 where absent."""
        get = self.index.get
        return np.fromiter(
            (get(k, -1) for k in map(tuple, keys.tolist())), dtype=np.int64, count=len(keys)
        )

    def cells(self):
        for key, row in self.index.items():
            yield key, VoxelCell(self._centroids[row], self._covs[row], int(self._counts[row]))


def voxelize_scan(means, covs, r: float) -> GaussianVoxelMap:
    """Group distributions by voxel; each cell holds the plain averages."""
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    out = GaussianVoxelMap(r, capacity=max(len(means), 1))
    if len(means) == 0:
        return out
    keys = voxel_keys(means, r)
    uniq, first, inverse = unique_keys(keys)
    # order cells by first appearance so the result does not depend on key sorting
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    group = rank[inverse]
    n = len(uniq)
    counts = np.bincount(group, minlength=n)
    centroid = np.empty((n, 3))
    for c in range(3):
        centroid[:, c] = np.bincount(group, weights=means[:, c], minlength=n) / counts
    cov = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(3):
            cov[:, a, b] = np.bincount(group, weights=covs[:, a, b], minlength=n) / counts
    out._grow(n)
    out._keys[:n] = uniq[order]
    out._centroids[:n] = centroid
    out._covs[:n] = cov
    out._counts[:n] = counts
    out.index = {tuple(k): i for i, k in enumerate(uniq[order].tolist())}
    return out


def update_map(gmap: GaussianVoxelMap, temp: GaussianVoxelMap) -> GaussianVoxelMap:
    """Merge a scan's voxels into the global map in place.

    New keys are inserted verbatim.  Existing cells take the count-weighted
    mean of centroid and covariance; the stored count becomes ``max(M, N)``.
    """
    if gmap.voxel_size != temp.voxel_size:
        raise VoxelSizeMismatch(
            f"map voxel size {gmap.voxel_size} != scan voxel size {temp.voxel_size}"
        )
    n_temp = len(temp)
    if n_temp == 0:
        return gmap
    rows = gmap.lookup_rows(temp.keys)
    present = rows >= 0
    if np.any(present):
        r = rows[present]
        M = gmap._counts[r].astype(float)
        N = temp.counts[present].astype(float)
        tot = M + N
        gmap._centroids[r] = (
            M[:, None] * gmap._centroids[r] + N[:, None] * temp.centroids[present]
        ) / tot[:, None]
        gmap._covs[r] = (
            M[:, None, None] * gmap._covs[r] + N[:, None, None] * temp.covs[present]
        ) / tot[:, None, None]
        gmap._counts[r] = np.maximum(gmap._counts[r], temp.counts[present])
    new = np.flatnonzero(~present)
    if len(new):
        start = len(gmap)
        gmap._grow(start + len(new))
        stop = start + len(new)
        gmap._keys[start:stop] = temp.keys[new]
        gmap._centroids[start:stop] = temp.centroids[new]
        gmap._covs[start:stop] = temp.covs[new]
        gmap._counts[start:stop] = temp.counts[new]
        for i, k in enumerate(temp.keys[new].tolist()):
            gmap.index[tuple(k)] = start + i
    return gmap


def init_map(means, covs, r: float) -> GaussianVoxelMap:
    if len(means) == 0:
        raise ValueError("cannot initialise a map from an empty scan")
    return voxelize_scan(means, covs, r)

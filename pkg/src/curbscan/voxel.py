"""Sparse cubic voxel grid over a point cloud.

A grid maps integer voxel indices to point counts. The count of a voxel is
the sampling intensity used by every gradient computation downstream; empty
voxels are simply absent and read as intensity 0.

Indices are signed and unbounded (the grid never allocates dense storage).
Occupied cells are kept as a sorted array of packed 63-bit keys so that
batched lookups are a single ``searchsorted``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .io import PointCloud

_KEY_SHIFT = 21
_KEY_OFF = 1 << 20  # supports indices in [-2^20, 2^20)


def pack_keys(indices: np.ndarray) -> np.ndarray:
    """Pack (m, 3) int voxel indices into sortable int64 keys."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx.reshape(1, 3)
    if (np.abs(idx) >= _KEY_OFF).any():
        raise ValidationError("voxel index out of packable range (|i| >= 2^20)")
    return (
        ((idx[:, 0] + _KEY_OFF) << (2 * _KEY_SHIFT))
        | ((idx[:, 1] + _KEY_OFF) << _KEY_SHIFT)
        | (idx[:, 2] + _KEY_OFF)
    )


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pack_keys`; returns (m, 3) int64."""
    keys = np.asarray(keys, dtype=np.int64)
    mask = (1 << _KEY_SHIFT) - 1
    i = (keys >> (2 * _KEY_SHIFT)) - _KEY_OFF
    j = ((keys >> _KEY_SHIFT) & mask) - _KEY_OFF
    k = (keys & mask) - _KEY_OFF
    return np.stack([i, j, k], axis=1)


@dataclass(frozen=True)
class VoxelGrid:
    """Sparse voxel grid; ``indices`` sorted by packed key, ``counts`` >= 1."""

    origin: np.ndarray
    voxel_size: float
    indices: np.ndarray
    counts: np.ndarray
    keys: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.indices.shape[0]

    @property
    def n_points(self) -> int:
        return int(self.counts.sum())

    def point_to_index(self, points: np.ndarray) -> np.ndarray:
        """Map world points to voxel indices (floor semantics)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.floor((pts - self.origin) / self.voxel_size).astype(np.int64)

    def intensity(self, indices: np.ndarray) -> np.ndarray:
        """Counts at the given (m, 3) indices; absent cells read 0."""
        idx = np.atleast_2d(np.asarray(indices, dtype=np.int64))
        out_of_range = (np.abs(idx) >= _KEY_OFF).any(axis=1)
        safe = np.where(out_of_range[:, None], 0, idx)
        want = pack_keys(safe)
        pos = np.searchsorted(self.keys, want)
        pos_c = np.minimum(pos, len(self.keys) - 1) if len(self.keys) else pos
        hit = np.zeros(want.shape[0], dtype=bool)
        if len(self.keys):
            hit = self.keys[pos_c] == want
        out = np.where(hit, self.counts[pos_c], 0)
        out[out_of_range] = 0
        return out

    def intensity_at(self, i: int, j: int, k: int) -> int:
        return int(self.intensity(np.array([[i, j, k]]))[0])

    def neighborhood_27(self, index) -> np.ndarray:
        """The 3x3x3 intensity block centered on ``index`` (absent cells 0)."""
        idx = np.asarray(index, dtype=np.int64).reshape(3)
        off = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), axis=-1).reshape(-1, 3)
        return self.intensity(idx + off).reshape(3, 3, 3)

    def voxel_center(self, indices: np.ndarray) -> np.ndarray:
        """World coordinates of voxel centers, origin + (idx + 0.5) * size."""
        idx = np.atleast_2d(np.asarray(indices, dtype=np.float64))
        return self.origin + (idx + 0.5) * self.voxel_size


def build_grid(cloud: PointCloud, voxel_size: float = 0.04, origin=None) -> VoxelGrid:
    """Bucket a cloud into cubic voxels of edge ``voxel_size``.

    The grid origin defaults to the componentwise floor of the cloud's min
    corner to a multiple of ``voxel_size``, so identical clouds always
    produce identical grids; pass an explicit ``origin`` to compare grids
    across translated clouds (shifting a cloud by m * voxel_size then
    shifts every occupied index by m). Points exactly on a voxel boundary
    land in the higher-index voxel.
    """
    if voxel_size <= 0:
        raise ValidationError(f"voxel_size must be positive, got {voxel_size}")
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(np.asarray(cloud))
    if origin is None:
        lo, _ = cloud.bounds
        origin = np.floor(lo / voxel_size) * voxel_size
    else:
        origin = np.asarray(origin, dtype=np.float64).reshape(3)
        if not np.isfinite(origin).all():
            raise ValidationError("origin must be finite")
    idx = np.floor((cloud.points - origin) / voxel_size).astype(np.int64)
    keys = pack_keys(idx)
    uniq_keys, counts = np.unique(keys, return_counts=True)
    grid = VoxelGrid(
        origin=origin,
        voxel_size=float(voxel_size),
        indices=unpack_keys(uniq_keys),
        counts=counts.astype(np.int64),
        keys=uniq_keys,
    )
    return grid

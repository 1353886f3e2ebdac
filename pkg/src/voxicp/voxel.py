"""Voxelization of point clouds into per-cell Gaussian statistics.

Cells are half-open cubes [i*s, (i+1)*s) indexed by floor(p / s). Each cell
keeps raw sufficient statistics (count, sum, sum of outer products) so that
accumulators from different clouds merge exactly; mean and covariance are
derived views. Covariances are population covariances (divide by N).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from voxicp import _kernels

# Packed key layout: three 21-bit signed lattice coordinates in one int64.
_KEY_BITS = 21
_KEY_MASK = (1 << _KEY_BITS) - 1
_KEY_MIN = -(1 << (_KEY_BITS - 1))
_KEY_MAX = (1 << (_KEY_BITS - 1)) - 1


@dataclass
class PointCloud:
    """Points as an (N, 3) float64 array with optional per-point intensity."""

    points: np.ndarray
    intensity: np.ndarray | None = None
    dropped_points: int = 0

    def __post_init__(self) -> None:
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64)
            if self.intensity.shape != (len(self.points),):
                raise ValueError("intensity length must match points")

    def __len__(self) -> int:
        return len(self.points)


def voxel_index_of(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer lattice coordinates floor(p / voxel_size), (3,) or (N, 3)."""
    if voxel_size <= 0.0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    points = np.asarray(points, dtype=np.float64)
    return np.floor(points / voxel_size).astype(np.int64)


def pack_voxel_index(index: np.ndarray) -> np.ndarray:
    """Pack (N, 3) or (3,) lattice coordinates into int64 hash keys.

    Each coordinate gets 21 signed bits; indices outside that range are an
    input error (the cloud would span over +-3100 km at 3 m voxels).
    """
    index = np.asarray(index, dtype=np.int64)
    if index.min(initial=0) < _KEY_MIN or index.max(initial=0) > _KEY_MAX:
        raise ValueError("voxel index exceeds the 21-bit packed key range")
    masked = index & _KEY_MASK
    if index.ndim == 1:
        return masked[0] << (2 * _KEY_BITS) | masked[1] << _KEY_BITS | masked[2]
    return (
        masked[:, 0] << (2 * _KEY_BITS)
        | masked[:, 1] << _KEY_BITS
        | masked[:, 2]
    )


def unpack_voxel_key(key: np.ndarray) -> np.ndarray:
    """Inverse of pack_voxel_index; returns (..., 3) lattice coordinates."""
    key = np.asarray(key, dtype=np.int64)
    fields = np.stack(
        [key >> (2 * _KEY_BITS) & _KEY_MASK, key >> _KEY_BITS & _KEY_MASK, key & _KEY_MASK],
        axis=-1,
    )
    return np.where(fields > _KEY_MAX, fields - (1 << _KEY_BITS), fields)


@dataclass
class VoxelAccumulator:
    """Raw sufficient statistics of the points that fell into one cell."""

    count: int
    sum: np.ndarray
    sum_outer: np.ndarray

    @staticmethod
    def from_points(points: np.ndarray) -> "VoxelAccumulator":
        points = np.asarray(points, dtype=np.float64)
        return VoxelAccumulator(
            count=len(points),
            sum=points.sum(axis=0),
            sum_outer=points.T @ points,
        )

    def mean(self) -> np.ndarray:
        return self.sum / self.count

    def covariance(self) -> np.ndarray:
        mean = self.mean()
        cov = self.sum_outer / self.count - np.outer(mean, mean)
        return 0.5 * (cov + cov.T)


def merge_accumulators(a: VoxelAccumulator, b: VoxelAccumulator) -> VoxelAccumulator:
    """Additive merge; exact on counts, plain float sums on moments."""
    return VoxelAccumulator(a.count + b.count, a.sum + b.sum, a.sum_outer + b.sum_outer)


@dataclass
class GaussianVoxel:
    """Finalized cell: mean, symmetric population covariance, point count."""

    mean: np.ndarray
    cov: np.ndarray
    count: int


@dataclass
class VoxelGrid:
    """Finalized voxelization result backed by parallel arrays.

    Rows are sorted by packed key. ``sums``/``sum_outers`` keep the raw
    accumulators so grids can be fused into a map without revisiting points.
    """

    voxel_size: float
    keys: np.ndarray
    counts: np.ndarray
    sums: np.ndarray
    sum_outers: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    source_points: int = 0

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def is_empty(self) -> bool:
        return len(self.keys) == 0

    def voxel(self, row: int) -> GaussianVoxel:
        return GaussianVoxel(self.means[row], self.covs[row], int(self.counts[row]))

    def voxels(self) -> list[GaussianVoxel]:
        return [self.voxel(i) for i in range(len(self))]

    def indices(self) -> np.ndarray:
        """Lattice coordinates of every cell, (M, 3)."""
        return unpack_voxel_key(self.keys)


def _empty_grid(voxel_size: float, source_points: int) -> VoxelGrid:
    return VoxelGrid(
        voxel_size=voxel_size,
        keys=np.empty(0, dtype=np.int64),
        counts=np.empty(0, dtype=np.int64),
        sums=np.empty((0, 3)),
        sum_outers=np.empty((0, 3, 3)),
        means=np.empty((0, 3)),
        covs=np.empty((0, 3, 3)),
        source_points=source_points,
    )


def grid_from_stats(
    voxel_size: float,
    keys: np.ndarray,
    counts: np.ndarray,
    sums: np.ndarray,
    sum_outers: np.ndarray,
    source_points: int = 0,
) -> VoxelGrid:
    """Finalize raw per-cell statistics into a VoxelGrid (rows key-sorted)."""
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    counts = counts[order]
    sums = sums[order]
    sum_outers = sum_outers[order]
    means = sums / counts[:, None]
    covs = sum_outers / counts[:, None, None] - means[:, :, None] * means[:, None, :]
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    return VoxelGrid(
        voxel_size=voxel_size,
        keys=keys,
        counts=counts,
        sums=sums,
        sum_outers=sum_outers,
        means=means,
        covs=covs,
        source_points=source_points,
    )


def voxelize(
    cloud: PointCloud | np.ndarray,
    voxel_size: float,
    min_points: int = 6,
    reg: float = 1e-6,
) -> VoxelGrid:
    """Bin a cloud into Gaussian voxels, dropping cells below min_points.

    Args:
        cloud: PointCloud or (N, 3) array of finite points.
        voxel_size: cube edge length in meters, > 0.
        min_points: cells with fewer points are dropped (covariance of a
            handful of points is too ill-conditioned to invert).
        reg: diagonal loading used only to verify every output covariance
            is within a Cholesky factorization of positive definite.

    Returns:
        VoxelGrid; empty (len 0) when no cell survives, which callers treat
        as the no-output signal.
    """
    if voxel_size <= 0.0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {points.shape}")
    if len(points) and not np.isfinite(points).all():
        raise ValueError("cloud contains non-finite points")
    n_points = len(points)
    if n_points == 0:
        return _empty_grid(voxel_size, 0)

    # Table holds at most n_points distinct cells; keep load factor under 1/2.
    capacity = 1 << max(10, (2 * n_points - 1).bit_length())
    table_keys = np.full(capacity, -1, dtype=np.int64)
    table_rows = np.empty(capacity, dtype=np.int64)
    counts = np.zeros(n_points, dtype=np.int64)
    stats = np.zeros((n_points, 9))
    n_cells = _kernels.hash_voxelize(
        np.ascontiguousarray(points),
        1.0 / voxel_size,
        table_keys,
        table_rows,
        counts,
        stats,
        np.int64(_KEY_MIN),
        np.int64(_KEY_MAX),
    )
    if n_cells < 0:
        raise ValueError("voxel index exceeds the 21-bit packed key range")

    keys = _kernels.collect_rows(table_keys, table_rows, n_cells)
    counts = counts[:n_cells]
    stats = stats[:n_cells]
    keep = counts >= min_points
    if not keep.any():
        return _empty_grid(voxel_size, n_points)

    sums = np.ascontiguousarray(stats[keep, :3])
    flat = stats[keep][:, [3, 4, 5, 4, 6, 7, 5, 7, 8]]
    sum_outers = np.ascontiguousarray(flat.reshape(-1, 3, 3))
    grid = grid_from_stats(
        voxel_size,
        keys[keep],
        counts[keep],
        sums,
        sum_outers,
        source_points=n_points,
    )
    _repair_indefinite(grid.covs, reg)
    return grid


def _repair_indefinite(covs: np.ndarray, reg: float) -> None:
    """Clamp rare negative eigenvalues caused by catastrophic cancellation.

    Population covariances are positive semidefinite by construction; this
    only fires when far-from-origin coordinates erode that in float64. After
    it runs, cov + reg*I admits a Cholesky factorization for every cell.
    """
    if len(covs) == 0:
        return
    c = covs + reg * np.eye(3)
    minors1 = c[:, 0, 0]
    minors2 = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
    minors3 = (
        c[:, 0, 0] * (c[:, 1, 1] * c[:, 2, 2] - c[:, 1, 2] * c[:, 2, 1])
        - c[:, 0, 1] * (c[:, 1, 0] * c[:, 2, 2] - c[:, 1, 2] * c[:, 2, 0])
        + c[:, 0, 2] * (c[:, 1, 0] * c[:, 2, 1] - c[:, 1, 1] * c[:, 2, 0])
    )
    if (minors1 > 0).all() and (minors2 > 0).all() and (minors3 > 0).all():
        return
    for row in range(len(covs)):
        try:
            np.linalg.cholesky(covs[row] + reg * np.eye(3))
        except np.linalg.LinAlgError:
            vals, vecs = np.linalg.eigh(covs[row])
            covs[row] = (vecs * np.maximum(vals, 0.0)) @ vecs.T


def reduction_ratio(grid: VoxelGrid, original_count: int | None = None) -> float:
    """Fraction of points remaining after voxelization (cells / points)."""
    count = grid.source_points if original_count is None else original_count
    if count <= 0:
        raise ValueError("original point count must be positive")
    return len(grid) / count

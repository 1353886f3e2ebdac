"""Scan-to-map odometry: match voxels, refine the pose, fuse into the map.

The map keeps raw sufficient statistics per world-frame cell, so fusing a
scan is exact: a cell's (count, sum, sum of outer products) transforms in
closed form under a rigid motion and adds into the world cell containing the
transformed mean. Finalized Gaussians are rebuilt from those statistics
after every fusion, never incrementally approximated; nearest-neighbor
trees are built lazily, over a local window of the map when it is large,
without ever changing which gated matches are found.

Everything here is deterministic: fixed iteration orders, no thread-order
dependent reductions, and timing is recorded but never read back into the
estimate.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np
from numba import typed, types
from scipy.spatial import cKDTree

from . import _kernels
from .kitti import Trajectory
from .metrics import Correspondence, CostParams
from .optimizer import FactorizationError, NewtonConfig, Objective, newton_solve
from .se3 import Pose, compose, log_map
from .voxel import (
    PointCloud,
    VoxelAccumulator,
    VoxelGrid,
    _repair_indefinite,
    grid_from_stats,
    pack_voxel_index,
    voxel_index_of,
    voxelize,
)


class MotionModel(str, Enum):
    IDENTITY = "identity"
    CONSTANT_VELOCITY = "constant-velocity"


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for the whole odometry pipeline; every size in meters."""

    voxel_size: float = 3.0
    cost: CostParams = field(default_factory=CostParams)
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    max_correspondence_distance: float | None = None  # default 2 * voxel_size
    motion_model: MotionModel = MotionModel.CONSTANT_VELOCITY
    min_points_per_voxel: int = 6
    max_rounds: int = 5
    max_map_voxels: int | None = None

    def __post_init__(self) -> None:
        if self.voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        if self.max_correspondence_distance is None:
            object.__setattr__(
                self, "max_correspondence_distance", 2.0 * self.voxel_size
            )
        if self.max_correspondence_distance <= 0.0:
            raise ValueError("max_correspondence_distance must be positive")
        if self.min_points_per_voxel < 1:
            raise ValueError("min_points_per_voxel must be at least 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if self.max_map_voxels is not None and self.max_map_voxels < 1:
            raise ValueError("max_map_voxels must be at least 1 when set")


class NeighborIndex:
    """Exact nearest-neighbor queries over a fixed set of points."""

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise ValueError("NeighborIndex needs a non-empty (N, 3) array")
        self._points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return len(self._points)

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distances and row indices of the nearest stored point per query."""
        queries = np.asarray(queries, dtype=np.float64)
        distances, rows = self._tree.query(queries, k=1)
        return np.atleast_1d(distances), np.atleast_1d(rows)


class VoxelMap:
    """World-frame voxel accumulators plus a finalized-Gaussian cache.

    ``max_cells`` caps map growth: once reached, statistics still accumulate
    into existing cells but no new cell is created. Off by default.
    """

    _WINDOW_THRESHOLD = 4096

    def __init__(
        self,
        voxel_size: float,
        min_points: int = 6,
        reg: float = 1e-6,
        max_cells: int | None = None,
    ):
        if voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.min_points = int(min_points)
        self.reg = float(reg)
        self.max_cells = max_cells
        capacity = 1024
        self._keys = np.empty(capacity, dtype=np.int64)
        self._counts = np.zeros(capacity, dtype=np.int64)
        self._sums = np.zeros((capacity, 3))
        self._outers = np.zeros((capacity, 3, 3))
        self._row_of = typed.Dict.empty(types.int64, types.int64)
        self._n = 0
        self._finalized = grid_from_stats(
            self.voxel_size,
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty((0, 3)),
            np.empty((0, 3, 3)),
        )
        self._version = 0
        self._full_index: NeighborIndex | None = None
        self._full_index_version = -1
        self._window: tuple[np.ndarray, float, NeighborIndex | None, np.ndarray] | None = None
        self._window_version = -1

    @property
    def n_cells(self) -> int:
        """Accumulator cells, including those below the finalization count."""
        return self._n

    @property
    def finalized(self) -> VoxelGrid:
        """Cells at or above min_points, as a key-sorted VoxelGrid."""
        return self._finalized

    @property
    def neighbor_index(self) -> NeighborIndex | None:
        """Exact nearest-neighbor index over every finalized mean (lazy)."""
        if len(self._finalized) == 0:
            return None
        if self._full_index_version != self._version:
            self._full_index = NeighborIndex(self._finalized.means)
            self._full_index_version = self._version
        return self._full_index

    @property
    def is_empty(self) -> bool:
        return len(self._finalized) == 0

    def nearest_finalized(
        self, queries: np.ndarray, max_dist: float
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exact gated nearest finalized voxel for each query point.

        Returns (query_rows, map_rows, distances) covering exactly the
        queries whose nearest finalized mean lies within max_dist. When the
        map is large, the search runs on a cached window of cells around the
        queries; the window provably contains every cell within max_dist of
        any query, so the gated matches are identical to a full-map search.
        """
        queries = np.asarray(queries, dtype=np.float64)
        empty = (
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.float64),
        )
        if len(self._finalized) == 0 or len(queries) == 0:
            return empty
        if len(self._finalized) <= self._WINDOW_THRESHOLD:
            distances, rows = self.neighbor_index.nearest(queries)
            keep = distances <= max_dist
            query_rows = np.nonzero(keep)[0].astype(np.int64)
            return query_rows, rows[keep].astype(np.int64), distances[keep]

        window = self._window
        if window is not None and self._window_version == self._version:
            center, radius, _, _ = window
            reach = float(np.max(np.linalg.norm(queries - center, axis=1)))
            if reach + max_dist > radius:
                window = None
        else:
            window = None
        if window is None:
            center = queries.mean(axis=0)
            reach = float(np.max(np.linalg.norm(queries - center, axis=1)))
            radius = reach + max_dist + max(2.0 * max_dist, 10.0)
            means = self._finalized.means
            rows = np.nonzero(np.linalg.norm(means - center, axis=1) <= radius)[0]
            index = NeighborIndex(means[rows]) if len(rows) else None
            window = (center, radius, index, rows.astype(np.int64))
            self._window = window
            self._window_version = self._version
        _, _, index, rows = window
        if index is None:
            # no cell within radius >= reach + max_dist of the window
            # center, hence none within max_dist of any query
            return empty
        distances, local = index.nearest(queries)
        keep = distances <= max_dist
        query_rows = np.nonzero(keep)[0].astype(np.int64)
        return query_rows, rows[local[keep]], distances[keep]

    def accumulator(self, index: np.ndarray) -> VoxelAccumulator:
        """Raw statistics of the cell at a lattice index (KeyError if absent)."""
        key = int(pack_voxel_index(np.asarray(index, dtype=np.int64)[None, :])[0])
        row = self._row_of[key]
        return VoxelAccumulator(
            count=int(self._counts[row]),
            sum=self._sums[row].copy(),
            sum_outer=self._outers[row].copy(),
        )

    def _grow(self) -> None:
        capacity = 2 * len(self._keys)
        for name, shape in (("_keys", ()), ("_counts", ()), ("_sums", (3,)), ("_outers", (3, 3))):
            old = getattr(self, name)
            new = np.zeros((capacity, *shape), dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    def _absorb(
        self,
        keys: np.ndarray,
        counts: np.ndarray,
        sums: np.ndarray,
        outers: np.ndarray,
    ) -> None:
        while self._n + len(keys) > len(self._keys):
            self._grow()
        cap = -1 if self.max_cells is None else self.max_cells
        self._n = int(
            _kernels.absorb_stats(
                self._row_of,
                self._keys,
                self._counts,
                self._sums,
                self._outers,
                self._n,
                cap,
                np.ascontiguousarray(keys, dtype=np.int64),
                np.ascontiguousarray(counts, dtype=np.int64),
                np.ascontiguousarray(sums, dtype=np.float64),
                np.ascontiguousarray(outers, dtype=np.float64),
            )
        )

    def _refresh(self) -> None:
        n = self._n
        self._version += 1
        keep = self._counts[:n] >= self.min_points
        if not keep.any():
            self._finalized = grid_from_stats(
                self.voxel_size,
                np.empty(0, dtype=np.int64),
                np.empty(0, dtype=np.int64),
                np.empty((0, 3)),
                np.empty((0, 3, 3)),
            )
            return
        self._finalized = grid_from_stats(
            self.voxel_size,
            self._keys[:n][keep].copy(),
            self._counts[:n][keep].copy(),
            self._sums[:n][keep].copy(),
            self._outers[:n][keep].copy(),
        )
        _repair_indefinite(self._finalized.covs, self.reg)


@dataclass
class RegistrationDiagnostics:
    """What happened inside one register_scan call."""

    rounds: int
    n_correspondences: int
    converged: bool
    fell_back: bool


@dataclass
class OdometryState:
    current_pose: Pose
    previous_pose: Pose
    map: VoxelMap
    frame_index: int = -1
    timing: list["FrameTiming"] = field(default_factory=list)
    last_registration: RegistrationDiagnostics | None = None

    @classmethod
    def initial(cls, config: PipelineConfig) -> "OdometryState":
        vmap = VoxelMap(
            config.voxel_size,
            min_points=config.min_points_per_voxel,
            reg=config.cost.lam,
            max_cells=config.max_map_voxels,
        )
        return cls(Pose.identity(), Pose.identity(), vmap)


@dataclass(frozen=True)
class FrameTiming:
    frame_index: int
    voxelize_s: float
    register_s: float
    fuse_s: float

    @property
    def total_s(self) -> float:
        return self.voxelize_s + self.register_s + self.fuse_s


@dataclass
class OdometryResult:
    trajectory: Trajectory
    map: VoxelMap
    timing: list[FrameTiming]
    total_source_points: int
    fallback_frames: list[int] = field(default_factory=list)

    @property
    def total_pipeline_seconds(self) -> float:
        return sum(t.total_s for t in self.timing)

    @property
    def fps(self) -> float:
        """Mean frame rate over the in-memory pipeline (I/O excluded)."""
        elapsed = self.total_pipeline_seconds
        return len(self.timing) / elapsed if elapsed > 0.0 else float("inf")

    @property
    def map_reduction_ratio(self) -> float:
        """Finalized map Gaussians per source point fed into the pipeline."""
        if self.total_source_points <= 0:
            raise ValueError("no source points recorded")
        return len(self.map.finalized) / self.total_source_points


def _match_rows(
    scan: VoxelGrid, vmap: VoxelMap, pose: Pose, max_dist: float
) -> tuple[np.ndarray, np.ndarray]:
    if scan.is_empty or vmap.is_empty:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    moved = scan.means @ pose.rotation.T + pose.translation
    scan_rows, map_rows, _ = vmap.nearest_finalized(moved, max_dist)
    return scan_rows, map_rows


def find_correspondences(
    scan: VoxelGrid, vmap: VoxelMap, pose: Pose, max_dist: float
) -> list[Correspondence]:
    """Nearest finalized map voxel for each scan voxel, gated by distance.

    The match is by Euclidean distance between the pose-transformed scan
    mean and the map voxel mean, and it is exact, not approximate. An empty
    list is the no-correspondence signal.
    """
    scan_rows, map_rows = _match_rows(scan, vmap, pose, max_dist)
    finalized = vmap.finalized
    return [
        Correspondence(source=scan.voxel(int(i)), target=finalized.voxel(int(j)))
        for i, j in zip(scan_rows, map_rows)
    ]


def motion_guess(state: OdometryState, config: PipelineConfig) -> Pose:
    """Initial pose for the next frame under the configured motion model."""
    if config.motion_model is MotionModel.IDENTITY:
        return state.current_pose
    step = compose(state.previous_pose.inverse(), state.current_pose)
    return compose(state.current_pose, step)


def register_scan(scan: VoxelGrid, state: OdometryState, config: PipelineConfig) -> Pose:
    """Refine the motion-model guess by alternating matching and solving.

    Runs up to ``config.max_rounds`` rounds of correspondence search plus
    Newton refinement; stops early when the pose change between rounds drops
    below the Newton step tolerance. Falls back to the motion-model pose
    (flagged in state.last_registration) when no correspondences survive
    gating or the solver rejects the problem as degenerate.
    """
    guess = motion_guess(state, config)
    pose = guess
    rounds = 0
    n_corr = 0
    converged = False
    fell_back = False
    for rounds in range(1, config.max_rounds + 1):
        scan_rows, map_rows = _match_rows(
            scan, state.map, pose, config.max_correspondence_distance
        )
        n_corr = len(scan_rows)
        if n_corr == 0:
            pose = guess
            fell_back = True
            break
        finalized = state.map.finalized
        try:
            objective = Objective.from_arrays(
                scan.means[scan_rows],
                scan.covs[scan_rows],
                finalized.means[map_rows],
                finalized.covs[map_rows],
                config.cost,
            )
            result = newton_solve(objective, pose, config.newton)
        except (ValueError, FactorizationError):
            pose = guess
            fell_back = True
            break
        change = float(np.linalg.norm(log_map(compose(result.pose, pose.inverse()))))
        pose = result.pose
        converged = result.converged
        if change < config.newton.step_norm_tolerance:
            break
    state.last_registration = RegistrationDiagnostics(
        rounds=rounds,
        n_correspondences=n_corr,
        converged=converged,
        fell_back=fell_back,
    )
    return pose


def fuse_scan(scan: VoxelGrid, pose: Pose, vmap: VoxelMap) -> VoxelMap:
    """Add a scan's cell statistics to the map, transformed to world frame.

    For a cell with count n, sum S, and outer-product sum Q, the world-frame
    statistics under q = R p + t are exact:

        S' = R S + n t
        Q' = R Q R^T + (R S) t^T + t (R S)^T + n t t^T

    The whole cell lands in the world cell containing its transformed mean.
    Refreshes the finalized-Gaussian cache before returning; neighbor
    indexes rebuild lazily on the next query.
    """
    if scan.is_empty:
        return vmap
    if scan.voxel_size != vmap.voxel_size:
        raise ValueError(
            f"scan voxel size {scan.voxel_size} != map voxel size {vmap.voxel_size}"
        )
    rot = pose.rotation
    t = pose.translation
    counts = scan.counts
    rotated_sums = scan.sums @ rot.T
    sums = rotated_sums + counts[:, None] * t
    outers = (
        np.einsum("ab,nbc,dc->nad", rot, scan.sum_outers, rot)
        + rotated_sums[:, :, None] * t[None, None, :]
        + t[None, :, None] * rotated_sums[:, None, :]
        + counts[:, None, None] * np.outer(t, t)[None, :, :]
    )
    means = sums / counts[:, None]
    keys = pack_voxel_index(voxel_index_of(means, vmap.voxel_size))
    vmap._absorb(keys, counts, sums, outers)
    vmap._refresh()
    return vmap


def advance_odometry(
    state: OdometryState, cloud: "PointCloud | np.ndarray", config: PipelineConfig
) -> Pose:
    """Process one scan in place: voxelize, register, fuse, record timing.

    The first frame anchors at identity; a frame arriving while the map is
    still empty trusts the motion model and is flagged as a fallback. Returns
    the world pose assigned to the new frame and advances ``state`` to it.
    """
    frame = state.frame_index + 1
    begin = time.perf_counter()
    grid = voxelize(
        cloud, config.voxel_size, config.min_points_per_voxel, reg=config.cost.lam
    )
    after_voxelize = time.perf_counter()
    if frame == 0:
        pose = Pose.identity()
        state.last_registration = None
    elif state.map.is_empty:
        # nothing to register against yet; trust the motion model
        pose = motion_guess(state, config)
        state.last_registration = RegistrationDiagnostics(0, 0, False, True)
    else:
        pose = register_scan(grid, state, config)
    after_register = time.perf_counter()
    fuse_scan(grid, pose, state.map)
    after_fuse = time.perf_counter()

    state.previous_pose = state.current_pose
    state.current_pose = pose
    state.frame_index = frame
    state.timing.append(
        FrameTiming(
            frame_index=frame,
            voxelize_s=after_voxelize - begin,
            register_s=after_register - after_voxelize,
            fuse_s=after_fuse - after_register,
        )
    )
    return pose


def run_odometry(
    scans: Iterable["PointCloud | np.ndarray"], config: PipelineConfig | None = None
) -> OdometryResult:
    """Voxelize, register, and fuse every scan; first frame anchors at identity.

    Per-frame wall-clock covers voxelize + register + fuse only; pulling the
    next scan from the iterable (usually disk I/O) is never timed.
    """
    cfg = config if config is not None else PipelineConfig()
    state = OdometryState.initial(cfg)
    entries: list[tuple[int, Pose]] = []
    fallback_frames: list[int] = []
    total_points = 0

    for cloud in scans:
        total_points += len(cloud)
        pose = advance_odometry(state, cloud, cfg)
        entries.append((state.frame_index, pose))
        if state.last_registration is not None and state.last_registration.fell_back:
            fallback_frames.append(state.frame_index)

    if not entries:
        raise ValueError("run_odometry needs at least one scan")
    return OdometryResult(
        trajectory=Trajectory(entries),
        map=state.map,
        timing=state.timing,
        total_source_points=total_points,
        fallback_frames=fallback_frames,
    )

"""Dataset ingestion and trajectory files in KITTI odometry conventions.

A Velodyne frame is a flat little-endian record stream of four float32 per
point (x, y, z, reflectance), in meters. Ground-truth pose files carry one
row-major 3x4 matrix per line. Trajectories written here read back exactly:
floats are printed with 17 significant digits.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .se3 import Pose, orthonormalize
from .voxel import PointCloud

_POINT_RECORD_BYTES = 16
# above this the file earns a warning; between this and the Pose tolerance
# the rotation is still projected, silently
_DRIFT_WARN = 1e-6
_DRIFT_FIX = 1e-9

TRAJECTORY_FORMATS = ("kitti_3x4", "tum")


class Trajectory:
    """Poses indexed by strictly increasing frame numbers."""

    def __init__(self, entries: Sequence[tuple[int, Pose]]):
        entries = list(entries)
        for (a, _), (b, _) in zip(entries, entries[1:]):
            if b <= a:
                raise ValueError(
                    f"frame indices must be strictly increasing, got {a} then {b}"
                )
        self._entries = entries

    @classmethod
    def from_poses(cls, poses: Sequence[Pose], start: int = 0) -> "Trajectory":
        return cls([(start + i, pose) for i, pose in enumerate(poses)])

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[tuple[int, Pose]]:
        return iter(self._entries)

    def __getitem__(self, row: int) -> tuple[int, Pose]:
        return self._entries[row]

    @property
    def frame_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self._entries], dtype=np.int64)

    @property
    def poses(self) -> list[Pose]:
        return [p for _, p in self._entries]

    def positions(self) -> np.ndarray:
        """Translations stacked as (N, 3)."""
        if not self._entries:
            return np.empty((0, 3))
        return np.stack([p.translation for _, p in self._entries])

    def rotations(self) -> np.ndarray:
        if not self._entries:
            return np.empty((0, 3, 3))
        return np.stack([p.rotation for _, p in self._entries])


@dataclass
class VelodyneReadStats:
    """Per-sequence counters a reader accumulates across frames."""

    frames: int = 0
    points: int = 0
    dropped: int = 0


def read_velodyne_bin(path: str | Path) -> PointCloud:
    """Read one Velodyne frame; non-finite points are dropped, not fatal."""
    raw = Path(path).read_bytes()
    if len(raw) % _POINT_RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: size {len(raw)} is not a multiple of {_POINT_RECORD_BYTES} bytes"
        )
    records = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    points = records[:, :3].astype(np.float64)
    intensity = records[:, 3].astype(np.float64)
    finite = np.isfinite(points).all(axis=1)
    dropped = int(len(points) - finite.sum())
    if dropped:
        points = points[finite]
        intensity = intensity[finite]
    return PointCloud(points=points, intensity=intensity, dropped_points=dropped)


def sequence_frames(directory: str | Path) -> list[Path]:
    """Sorted .bin frame paths of a KITTI velodyne sequence directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(directory.glob("*.bin"))


def read_sequence(directory: str | Path) -> Iterator[PointCloud]:
    """Lazily read every frame of a sequence directory in index order."""
    for path in sequence_frames(directory):
        yield read_velodyne_bin(path)


def _pose_from_row(values: np.ndarray, line_no: int, path: str | Path) -> Pose:
    mat = values.reshape(3, 4)
    rot = mat[:, :3]
    defect = float(np.abs(rot @ rot.T - np.eye(3)).max())
    if defect > _DRIFT_WARN:
        warnings.warn(
            f"{path} line {line_no}: rotation drift {defect:.3e}, re-orthonormalized"
        )
        rot = orthonormalize(rot)
    elif defect > _DRIFT_FIX:
        rot = orthonormalize(rot)
    return Pose(rot, mat[:, 3])


def read_kitti_poses(path: str | Path) -> Trajectory:
    """Parse a KITTI pose file: one row-major 3x4 matrix per line."""
    entries = []
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 12:
                raise ValueError(
                    f"{path} line {line_no}: expected 12 values, got {len(fields)}"
                )
            try:
                values = np.array([float(f) for f in fields])
            except ValueError as exc:
                raise ValueError(f"{path} line {line_no}: {exc}") from exc
            entries.append((len(entries), _pose_from_row(values, line_no, path)))
    return Trajectory(entries)


def format_trajectory(trajectory: Trajectory, fmt: str = "kitti_3x4") -> str:
    """Render a trajectory as file text in either supported format."""
    if fmt not in TRAJECTORY_FORMATS:
        raise ValueError(f"unknown trajectory format {fmt!r}, choose from {TRAJECTORY_FORMATS}")
    lines = []
    for index, pose in trajectory:
        if fmt == "kitti_3x4":
            row = pose.matrix()[:3, :].reshape(12)
            lines.append(" ".join(f"{v:.17g}" for v in row))
        else:
            qx, qy, qz, qw = Rotation.from_matrix(pose.rotation).as_quat()
            t = pose.translation
            lines.append(
                f"{index} " + " ".join(f"{v:.17g}" for v in (t[0], t[1], t[2], qx, qy, qz, qw))
            )
    return "".join(line + "\n" for line in lines)


def write_trajectory(
    trajectory: Trajectory, path: str | Path, fmt: str = "kitti_3x4"
) -> None:
    Path(path).write_text(format_trajectory(trajectory, fmt))


def read_trajectory(path: str | Path, fmt: str = "kitti_3x4") -> Trajectory:
    """Inverse of write_trajectory for both supported formats."""
    if fmt not in TRAJECTORY_FORMATS:
        raise ValueError(f"unknown trajectory format {fmt!r}, choose from {TRAJECTORY_FORMATS}")
    if fmt == "kitti_3x4":
        return read_kitti_poses(path)
    entries = []
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 8:
                raise ValueError(
                    f"{path} line {line_no}: expected 8 values, got {len(fields)}"
                )
            index = int(fields[0])
            tx, ty, tz, qx, qy, qz, qw = (float(f) for f in fields[1:])
            rot = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
            defect = float(np.abs(rot @ rot.T - np.eye(3)).max())
            if defect > _DRIFT_FIX:
                rot = orthonormalize(rot)
            entries.append((index, Pose(rot, np.array([tx, ty, tz]))))
    return Trajectory(entries)

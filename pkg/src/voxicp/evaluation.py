"""Trajectory accuracy evaluation.

Two complementary measures:

* segment-based relative errors (`kitti_stats`): sample a start frame every
  ``start_step`` frames, walk forward along the reference path until the
  cumulative driven distance first reaches each nominal length L, and compare
  the estimated relative motion over that span against the reference relative
  motion.  Rotation errors are normalized to degrees per 100 m and translation
  errors to percent of distance driven, averaged over every sampled segment.
* absolute trajectory error (`ate`): rigidly align the estimated positions to
  the reference positions by closed-form least squares (no scale), then report
  RMS position error in meters and RMS geodesic rotation angle in degrees.

Both evaluators are pure functions of their inputs.
"""
from dataclasses import dataclass

import numpy as np

from .kitti import Trajectory
from .se3 import Pose, so3_log

SEGMENT_LENGTHS: tuple[float, ...] = (
    100.0,
    200.0,
    300.0,
    400.0,
    500.0,
    600.0,
    700.0,
    800.0,
)
"""Nominal segment lengths (meters) sampled by `kitti_stats`."""

START_STEP = 10
"""Default spacing between segment start frames."""

_RAD_PER_M_TO_DEG_PER_100M = np.degrees(1.0) * 100.0


@dataclass(frozen=True)
class LengthStats:
    """Average errors over every sampled segment of one nominal length."""

    length: float
    rotation_error: float
    translation_error: float
    segments: int


@dataclass(frozen=True)
class KittiStats:
    """Segment-relative trajectory errors.

    ``rotation_error`` is degrees per 100 m and ``translation_error`` is
    percent of distance driven, both averaged over all sampled segments.
    ``per_length`` holds the same averages restricted to one nominal segment
    length; lengths the trajectory never reaches are absent.  A trajectory too
    short to produce any segment yields ``segments == 0`` with NaN averages.
    """

    rotation_error: float
    translation_error: float
    per_length: tuple[LengthStats, ...]
    segments: int

    @property
    def is_empty(self) -> bool:
        return self.segments == 0


@dataclass(frozen=True)
class AteResult:
    """Absolute trajectory error after rigid alignment.

    ``alignment`` is the pose applied to the estimated trajectory before the
    residuals were measured, exposed so the alignment itself can be audited.
    """

    rotation_rmse: float
    translation_rmse: float
    alignment: Pose


def _check_paired(estimated: Trajectory, reference: Trajectory, minimum: int, word: str) -> None:
    if len(estimated) != len(reference):
        raise ValueError(
            f"trajectory lengths differ: {len(estimated)} estimated vs {len(reference)} reference"
        )
    if len(reference) < minimum:
        raise ValueError(f"need at least {word} frames, got {len(reference)}")


def _rotation_angle(rotation: np.ndarray) -> float:
    return float(np.linalg.norm(so3_log(rotation)))


def kitti_stats(
    estimated: Trajectory,
    reference: Trajectory,
    *,
    lengths: tuple[float, ...] = SEGMENT_LENGTHS,
    start_step: int = START_STEP,
) -> KittiStats:
    """Segment-relative errors of ``estimated`` against ``reference``.

    Segment ends are found on the reference path: the end of a segment of
    nominal length L starting at frame f is the first frame whose cumulative
    reference distance from f is at least L.  Starts are sampled every
    ``start_step`` frames; segments that would run off the end of the
    trajectory are skipped.  Errors are normalized by the nominal length.
    """
    _check_paired(estimated, reference, 2, "two")
    est = estimated.poses
    ref = reference.poses
    steps = np.linalg.norm(np.diff(reference.positions(), axis=0), axis=1)
    distance = np.concatenate([[0.0], np.cumsum(steps)])
    n = len(ref)

    rot_samples: dict[float, list[float]] = {length: [] for length in lengths}
    trans_samples: dict[float, list[float]] = {length: [] for length in lengths}
    for first in range(0, n, start_step):
        for length in lengths:
            last = int(np.searchsorted(distance, distance[first] + length, side="left"))
            if last >= n:
                continue
            delta_ref = ref[first].inverse() @ ref[last]
            delta_est = est[first].inverse() @ est[last]
            error = delta_est.inverse() @ delta_ref
            rot_samples[length].append(_rotation_angle(error.rotation) / length)
            trans_samples[length].append(float(np.linalg.norm(error.translation)) / length)

    per_length = tuple(
        LengthStats(
            length=length,
            rotation_error=float(np.mean(rot_samples[length])) * _RAD_PER_M_TO_DEG_PER_100M,
            translation_error=float(np.mean(trans_samples[length])) * 100.0,
            segments=len(rot_samples[length]),
        )
        for length in lengths
        if rot_samples[length]
    )
    all_rot = [value for length in lengths for value in rot_samples[length]]
    all_trans = [value for length in lengths for value in trans_samples[length]]
    if not all_rot:
        return KittiStats(float("nan"), float("nan"), (), 0)
    return KittiStats(
        rotation_error=float(np.mean(all_rot)) * _RAD_PER_M_TO_DEG_PER_100M,
        translation_error=float(np.mean(all_trans)) * 100.0,
        per_length=per_length,
        segments=len(all_rot),
    )


def _rigid_alignment(source: np.ndarray, target: np.ndarray) -> Pose:
    """Least-squares rigid motion taking source positions onto target ones.

    Closed form via SVD of the cross-covariance, with the determinant sign
    fixed so the result is a proper rotation.  Raises when the target point
    set is (nearly) collinear, where the alignment is not unique.
    """
    target_centered = target - target.mean(axis=0)
    spread = np.linalg.svd(target_centered, compute_uv=False)
    if spread[1] <= 1e-9 * max(spread[0], 1.0):
        raise ValueError("degenerate alignment: reference positions are nearly collinear")
    source_center = source.mean(axis=0)
    cross = (source - source_center).T @ target_centered
    u, _, vt = np.linalg.svd(cross)
    flip = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(vt.T @ u.T)))])
    rotation = vt.T @ flip @ u.T
    translation = target.mean(axis=0) - rotation @ source_center
    return Pose(rotation, translation)


def ate(estimated: Trajectory, reference: Trajectory) -> AteResult:
    """Absolute trajectory error of ``estimated`` against ``reference``.

    The estimated positions are first rigidly aligned to the reference by
    closed-form least squares (no scale), so a global offset between the two
    trajectories does not count as error.
    """
    _check_paired(estimated, reference, 3, "three")
    est_points = estimated.positions()
    ref_points = reference.positions()
    alignment = _rigid_alignment(est_points, ref_points)
    moved = est_points @ alignment.rotation.T + alignment.translation
    translation_rmse = float(np.sqrt(np.mean(np.sum((moved - ref_points) ** 2, axis=1))))
    angles = [
        _rotation_angle(alignment.rotation @ est_rot @ ref_rot.T)
        for est_rot, ref_rot in zip(estimated.rotations(), reference.rotations())
    ]
    rotation_rmse = float(np.degrees(np.sqrt(np.mean(np.square(angles)))))
    return AteResult(
        rotation_rmse=rotation_rmse,
        translation_rmse=translation_rmse,
        alignment=alignment,
    )

"""Seeded synthetic scenes and scan sequences for tests, demos, and sweeps.

Everything takes an explicit seed or Generator so runs are reproducible; no
function here touches global random state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kitti import Trajectory
from .metrics import Correspondence
from .se3 import Pose, compose, exp_map, so3_exp
from .voxel import GaussianVoxel, PointCloud


def _rng(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def room_scene(
    seed: int | np.random.Generator = 0,
    points_per_face: int = 30000,
    extent: tuple[float, float, float] = (40.0, 30.0, 12.0),
    surface_noise: float = 0.05,
    n_pillars: int = 6,
) -> np.ndarray:
    """Points on the walls, floor, and ceiling of a box, plus pillars.

    The box is centered on the origin so a sensor near zero sees structure
    in every direction. Surfaces get Gaussian jitter so voxel covariances
    are thin but not singular, like real wall returns.
    """
    rng = _rng(seed)
    lx, ly, lz = extent
    chunks = []

    def face(n, fixed_axis, fixed_value, a_axis, a_len, b_axis, b_len):
        pts = np.empty((n, 3))
        pts[:, fixed_axis] = fixed_value
        pts[:, a_axis] = rng.uniform(0.0, a_len, n)
        pts[:, b_axis] = rng.uniform(0.0, b_len, n)
        return pts

    chunks.append(face(points_per_face, 2, 0.0, 0, lx, 1, ly))   # floor
    chunks.append(face(points_per_face, 2, lz, 0, lx, 1, ly))    # ceiling
    chunks.append(face(points_per_face, 0, 0.0, 1, ly, 2, lz))
    chunks.append(face(points_per_face, 0, lx, 1, ly, 2, lz))
    chunks.append(face(points_per_face, 1, 0.0, 0, lx, 2, lz))
    chunks.append(face(points_per_face, 1, ly, 0, lx, 2, lz))

    per_pillar = max(points_per_face // 10, 500)
    for _ in range(n_pillars):
        cx = rng.uniform(0.15 * lx, 0.85 * lx)
        cy = rng.uniform(0.15 * ly, 0.85 * ly)
        radius = rng.uniform(0.4, 1.0)
        angle = rng.uniform(0.0, 2.0 * np.pi, per_pillar)
        height = rng.uniform(0.0, lz, per_pillar)
        pillar = np.column_stack(
            [cx + radius * np.cos(angle), cy + radius * np.sin(angle), height]
        )
        chunks.append(pillar)

    scene = np.concatenate(chunks)
    scene += rng.normal(0.0, surface_noise, scene.shape)
    scene -= np.array([lx / 2.0, ly / 2.0, lz / 2.0])
    return scene


def forward_trajectory(
    n_frames: int,
    step: float = 1.0,
    yaw_rate: float = 0.0,
    axis: int = 0,
) -> list[Pose]:
    """Poses advancing `step` meters per frame along an axis, optionally turning."""
    poses = [Pose.identity()]
    delta = np.zeros(6)
    delta[2] = yaw_rate
    delta[3 + axis] = step
    increment = exp_map(delta)
    for _ in range(n_frames - 1):
        poses.append(compose(poses[-1], increment))
    return poses


def render_scans(
    scene: np.ndarray,
    poses: list[Pose],
    seed: int | np.random.Generator = 0,
    points_per_frame: int = 60000,
    measurement_noise: float = 0.01,
    max_range: float | None = None,
    resample_each_frame: bool = False,
) -> list[PointCloud]:
    """Sensor-frame clouds of a world scene observed from the given poses.

    By default every frame observes the same fixed subset of scene points
    (like a laser revisiting the same surfaces), each time with fresh
    isotropic noise; p_sensor = R^T (p_world - t). With
    resample_each_frame=True each frame draws an independent subset, which
    adds voxel-sampling jitter on top of the measurement noise.
    """
    rng = _rng(seed)
    base = scene
    if not resample_each_frame and len(scene) > points_per_frame:
        rows = rng.choice(len(scene), size=points_per_frame, replace=False)
        base = scene[rows]
    clouds = []
    for pose in poses:
        points = base
        if resample_each_frame and len(scene) > points_per_frame:
            rows = rng.choice(len(scene), size=points_per_frame, replace=False)
            points = scene[rows]
        if max_range is not None:
            mask = np.linalg.norm(points - pose.translation, axis=1) <= max_range
            points = points[mask]
        local = (points - pose.translation) @ pose.rotation
        local = local + rng.normal(0.0, measurement_noise, local.shape)
        clouds.append(PointCloud(points=local))
    return clouds


@dataclass
class SyntheticSequence:
    clouds: list[PointCloud]
    truth: Trajectory
    scene: np.ndarray


def drive_sequence(
    seed: int = 0,
    n_frames: int = 10,
    step: float = 0.8,
    yaw_rate: float = 0.01,
    points_per_frame: int = 60000,
    measurement_noise: float = 0.01,
) -> SyntheticSequence:
    """A short drive through a box room: scene, scans, and ground truth."""
    rng = _rng(seed)
    scene = room_scene(rng)
    poses = forward_trajectory(n_frames, step=step, yaw_rate=yaw_rate)
    clouds = render_scans(
        scene,
        poses,
        rng,
        points_per_frame=points_per_frame,
        measurement_noise=measurement_noise,
    )
    return SyntheticSequence(
        clouds=clouds, truth=Trajectory.from_poses(poses), scene=scene
    )


def random_spd(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((3, 3))
    return scale * (a @ a.T + 0.1 * np.eye(3))


def gaussian_scene_correspondences(
    seed: int | np.random.Generator = 0,
    n: int = 20,
    motion: Pose | None = None,
    spread: float = 5.0,
    cov_scale: float = 0.3,
    outlier_fraction: float = 0.0,
    outlier_distance: float = 40.0,
) -> list[Correspondence]:
    """Matched Gaussian pairs where the source side is moved by `motion`.

    With outlier_fraction > 0, that share of pairs gets its target replaced
    by a random far-away Gaussian, simulating bad associations.
    """
    rng = _rng(seed)
    if motion is None:
        motion = Pose.identity()
    rot = motion.rotation
    corrs = []
    n_outliers = int(round(outlier_fraction * n))
    for i in range(n):
        mu = rng.standard_normal(3) * spread
        cov = random_spd(rng, cov_scale)
        source = GaussianVoxel(motion.transform(mu), rot @ cov @ rot.T, 10)
        if i < n_outliers:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            target = GaussianVoxel(
                mu + direction * outlier_distance, random_spd(rng, cov_scale), 10
            )
        else:
            target = GaussianVoxel(mu, cov, 10)
        corrs.append(Correspondence(source=source, target=target))
    return corrs


def random_motion(
    seed: int | np.random.Generator,
    max_angle: float,
    translation_norm: float,
) -> Pose:
    """A rotation of exactly max_angle about a random axis plus a random
    translation of exactly translation_norm."""
    rng = _rng(seed)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    return Pose(so3_exp(axis * max_angle), direction * translation_norm)


def derivative_validation_sweep(
    configurations: int = 100,
    seed: int = 0,
    fd_step: float = 1e-6,
) -> "list[DerivativeReport]":
    """Check analytic derivatives on randomized objectives, one report each.

    Cost kinds rotate round-robin; correspondence counts, model parameters,
    and the evaluation pose vary per configuration so the checks hit generic
    points rather than minima.
    """
    from .metrics import CostKind, CostParams
    from .optimizer import DerivativeReport, Objective, check_derivatives

    rng = _rng(seed)
    kinds = list(CostKind)
    reports: list[DerivativeReport] = []
    for i in range(configurations):
        kind = kinds[i % len(kinds)]
        params = CostParams(
            kind=kind,
            lam=float(rng.uniform(1e-7, 1e-4)),
            sigma_icp=float(rng.uniform(0.3, 1.5)),
            sigma_cov=float(rng.uniform(1.0, 5.0)),
        )
        motion = random_motion(rng, rng.uniform(0.0, 0.25), rng.uniform(0.0, 2.0))
        correspondences = gaussian_scene_correspondences(
            rng,
            n=int(rng.integers(5, 26)),
            motion=motion,
            cov_scale=float(rng.uniform(0.1, 0.6)),
        )
        pose = random_motion(rng, rng.uniform(0.0, 0.2), rng.uniform(0.0, 1.0))
        reports.append(check_derivatives(Objective(correspondences, params), pose, fd_step))
    return reports

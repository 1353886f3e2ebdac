"""Request and response bodies for the HTTP service.

Poses travel as 12-number row-major 3x4 matrices everywhere, matching the
trajectory file format, so a client never converts between conventions.
"""
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from ..config import RunConfig
from ..kitti import Trajectory
from ..metrics import CostKind
from ..registration import MotionModel
from ..se3 import Pose, orthonormalize

CostName = Literal["icp", "ndt", "gicp", "litamin", "litamin2-icp", "litamin2-icp-cov"]
MotionName = Literal["identity", "constant-velocity"]
FormatName = Literal["kitti_3x4", "tum"]


class PipelineSettings(BaseModel):
    """Flat pipeline settings; field names match the config file keys."""

    model_config = ConfigDict(populate_by_name=True)

    voxel_size: float = Field(3.0, gt=0.0)
    cost: CostName = "litamin2-icp-cov"
    lam: float = Field(1e-6, gt=0.0, alias="lambda")
    sigma_icp: float = Field(0.5, gt=0.0)
    sigma_cov: float = Field(3.0, gt=0.0)
    max_correspondence_distance: float | None = Field(None, gt=0.0)
    motion_model: MotionName = "constant-velocity"
    min_points_per_voxel: int = Field(6, ge=1)
    max_rounds: int = Field(5, ge=1)
    max_map_voxels: int | None = Field(None, ge=1)
    max_iterations: int = Field(30, ge=1)
    step_norm_tolerance: float = Field(1e-6, gt=0.0)
    hessian_regularization: float = Field(1e-9, gt=0.0)
    max_step_norm: float = Field(1.0, gt=0.0)

    def run_config(self) -> RunConfig:
        return RunConfig(
            voxel_size=self.voxel_size,
            cost=CostKind(self.cost),
            lam=self.lam,
            sigma_icp=self.sigma_icp,
            sigma_cov=self.sigma_cov,
            max_correspondence_distance=self.max_correspondence_distance,
            motion_model=MotionModel(self.motion_model),
            min_points_per_voxel=self.min_points_per_voxel,
            max_rounds=self.max_rounds,
            max_map_voxels=self.max_map_voxels,
            max_iterations=self.max_iterations,
            step_norm_tolerance=self.step_norm_tolerance,
            hessian_regularization=self.hessian_regularization,
            max_step_norm=self.max_step_norm,
        )

    @classmethod
    def from_run_config(cls, config: RunConfig) -> "PipelineSettings":
        return cls(
            voxel_size=config.voxel_size,
            cost=config.cost.value,
            lam=config.lam,
            sigma_icp=config.sigma_icp,
            sigma_cov=config.sigma_cov,
            max_correspondence_distance=config.max_correspondence_distance,
            motion_model=config.motion_model.value,
            min_points_per_voxel=config.min_points_per_voxel,
            max_rounds=config.max_rounds,
            max_map_voxels=config.max_map_voxels,
            max_iterations=config.max_iterations,
            step_norm_tolerance=config.step_norm_tolerance,
            hessian_regularization=config.hessian_regularization,
            max_step_norm=config.max_step_norm,
        )


class PoseModel(BaseModel):
    """Rigid transform as the 12 numbers of its top three matrix rows."""

    rows: list[float] = Field(min_length=12, max_length=12)

    @field_validator("rows")
    @classmethod
    def _finite(cls, rows: list[float]) -> list[float]:
        if not np.all(np.isfinite(rows)):
            raise ValueError("pose entries must be finite")
        return rows

    @classmethod
    def from_pose(cls, pose: Pose) -> "PoseModel":
        return cls(rows=pose.matrix()[:3, :].reshape(12).tolist())

    def to_pose(self) -> Pose:
        matrix = np.asarray(self.rows, dtype=np.float64).reshape(3, 4)
        rotation = matrix[:, :3]
        defect = float(np.abs(rotation @ rotation.T - np.eye(3)).max())
        if defect > 1e-6:
            raise ValueError(f"rotation block is not orthonormal (defect {defect:.3e})")
        if defect > 1e-9:
            rotation = orthonormalize(rotation)
        return Pose(rotation, matrix[:, 3])


def trajectory_from_rows(rows: list[list[float]]) -> Trajectory:
    poses = [PoseModel(rows=row).to_pose() for row in rows]
    return Trajectory.from_poses(poses)


class HealthResponse(BaseModel):
    status: str
    version: str


class SessionCreated(BaseModel):
    session_id: str
    settings: PipelineSettings


class SessionStatus(BaseModel):
    session_id: str
    frames: int
    map_voxels: int
    total_points: int
    fallback_frames: list[int]
    compute_seconds: float
    fps: float | None


class FrameTimingModel(BaseModel):
    voxelize_s: float
    register_s: float
    fuse_s: float

    @property
    def total_s(self) -> float:
        return self.voxelize_s + self.register_s + self.fuse_s


class FrameResult(BaseModel):
    frame_index: int
    pose: PoseModel
    timing: FrameTimingModel
    fell_back: bool
    rounds: int | None
    n_correspondences: int | None
    converged: bool | None
    map_voxels: int


class RegisterRequest(BaseModel):
    """Align a source point cloud to a target point cloud."""

    source_points: list[list[float]]
    target_points: list[list[float]]
    initial: PoseModel | None = None
    settings: PipelineSettings = Field(default_factory=PipelineSettings)

    @field_validator("source_points", "target_points")
    @classmethod
    def _points_shape(cls, points: list[list[float]]) -> list[list[float]]:
        arr = np.asarray(points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError("points must be a list of [x, y, z] triples")
        if not np.all(np.isfinite(arr)):
            raise ValueError("points must be finite")
        return points


class RegisterResponse(BaseModel):
    pose: PoseModel
    fell_back: bool
    rounds: int
    n_correspondences: int
    converged: bool


class EvaluateRequest(BaseModel):
    """Trajectories as lists of 12-number rows, frame i = row i."""

    estimated: list[list[float]]
    reference: list[list[float]]


class LengthStatsModel(BaseModel):
    length_m: float
    rotation_error_deg_per_100m: float
    translation_error_percent: float
    segments: int


class KittiStatsModel(BaseModel):
    rotation_error_deg_per_100m: float
    translation_error_percent: float
    segments: int
    per_length: list[LengthStatsModel]


class AteModel(BaseModel):
    rotation_rmse_deg: float
    translation_rmse_m: float
    alignment: PoseModel


class EvaluateResponse(BaseModel):
    kitti: KittiStatsModel | None
    kitti_note: str | None = None
    ate: AteModel | None
    ate_note: str | None = None


class DerivativeCheckRequest(BaseModel):
    configurations: int = Field(100, ge=1, le=10000)
    seed: int = 0
    fd_step: float = Field(1e-6, gt=0.0)
    gradient_tolerance: float = Field(1e-5, gt=0.0)
    hessian_tolerance: float = Field(1e-4, gt=0.0)


class DerivativeCheckResponse(BaseModel):
    configurations: int
    worst_gradient_deviation: float
    worst_hessian_deviation: float
    gradient_tolerance: float
    hessian_tolerance: float
    passed: bool

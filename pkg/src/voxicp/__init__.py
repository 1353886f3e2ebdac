"""Voxelized Gaussian ICP registration and LiDAR odometry.

The root namespace re-exports the core estimation API. The HTTP service
lives in ``voxicp.service`` and the command line in ``voxicp.cli``; neither
is imported here so that using the library pulls in no web machinery.
"""

from voxicp.config import RunConfig, read_run_config, write_run_config
from voxicp.evaluation import AteResult, KittiStats, ate, kitti_stats
from voxicp.kitti import (
    TRAJECTORY_FORMATS,
    Trajectory,
    read_trajectory,
    read_velodyne_bin,
    sequence_frames,
    write_trajectory,
)
from voxicp.metrics import Correspondence, CostKind, CostParams, cost, sym_kl
from voxicp.optimizer import NewtonConfig, Objective, check_derivatives, newton_solve
from voxicp.registration import (
    MotionModel,
    OdometryResult,
    OdometryState,
    PipelineConfig,
    VoxelMap,
    advance_odometry,
    find_correspondences,
    fuse_scan,
    register_scan,
    run_odometry,
)
from voxicp.se3 import Pose, compose, exp_map, log_map, transform_gaussian
from voxicp.voxel import GaussianVoxel, PointCloud, VoxelGrid, voxelize

__all__ = [
    "AteResult",
    "Correspondence",
    "CostKind",
    "CostParams",
    "GaussianVoxel",
    "KittiStats",
    "MotionModel",
    "NewtonConfig",
    "Objective",
    "OdometryResult",
    "OdometryState",
    "PipelineConfig",
    "PointCloud",
    "Pose",
    "RunConfig",
    "TRAJECTORY_FORMATS",
    "Trajectory",
    "VoxelGrid",
    "VoxelMap",
    "advance_odometry",
    "ate",
    "check_derivatives",
    "compose",
    "cost",
    "exp_map",
    "find_correspondences",
    "fuse_scan",
    "kitti_stats",
    "log_map",
    "newton_solve",
    "read_run_config",
    "read_trajectory",
    "read_velodyne_bin",
    "register_scan",
    "run_odometry",
    "sequence_frames",
    "sym_kl",
    "transform_gaussian",
    "voxelize",
    "write_run_config",
    "write_trajectory",
]

__version__ = "0.1.0"

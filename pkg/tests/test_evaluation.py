"""Trajectory evaluation against closed-form and grid-search oracles.

The segment-error oracle is a hand-evaluated straight-line trajectory where
the relative-error formula collapses to a constant; the alignment oracle is
an iteratively refined grid search over rotation space (for squared loss the
optimal translation at fixed rotation is the centroid difference, so the
search only has to cover rotations).
"""
import math

import numpy as np
import pytest

from voxicp.evaluation import SEGMENT_LENGTHS, ate, kitti_stats
from voxicp.kitti import Trajectory
from voxicp.se3 import Pose, compose, orthonormalize, so3_exp


def line_trajectory(n, spacing=1.0, scale=1.0):
    """Frames marching along +x with identity rotations."""
    return Trajectory.from_poses(
        [Pose(np.eye(3), np.array([scale * spacing * i, 0.0, 0.0])) for i in range(n)]
    )


def curved_trajectory(n, seed, step=1.6):
    """Smooth random drive: heading integrates small turns each frame."""
    rng = np.random.default_rng(seed)
    rotation = np.eye(3)
    position = np.zeros(3)
    entries = []
    for i in range(n):
        entries.append((i, Pose(rotation.copy(), position.copy())))
        rotation = orthonormalize(rotation @ so3_exp(rng.normal(0.0, 0.02, 3)))
        position = position + rotation @ np.array([step, 0.0, 0.1 * rng.normal()])
    return Trajectory(entries)


def perturbed(trajectory, seed, rot_sigma=0.002, trans_sigma=0.05):
    rng = np.random.default_rng(seed)
    entries = []
    for index, pose in trajectory:
        rot = orthonormalize(so3_exp(rng.normal(0.0, rot_sigma, 3)) @ pose.rotation)
        entries.append((index, Pose(rot, pose.translation + rng.normal(0.0, trans_sigma, 3))))
    return Trajectory(entries)


def moved_by(trajectory, g):
    return Trajectory([(index, compose(g, pose)) for index, pose in trajectory])


def grid_search_rmse(est_points, ref_points):
    """Best rigid-alignment RMSE by refined search over rotation vectors.

    For any fixed rotation the squared loss is quadratic in the translation,
    minimized exactly at the centroid difference, so translations need no
    grid of their own.
    """
    center = np.zeros(3)
    half_width = 0.3
    best_rmse = np.inf
    best_omega = center
    for _ in range(8):
        offsets = np.linspace(-half_width, half_width, 9)
        for dx in offsets:
            for dy in offsets:
                for dz in offsets:
                    rot = so3_exp(center + np.array([dx, dy, dz]))
                    moved = est_points @ rot.T
                    moved = moved + (ref_points.mean(axis=0) - moved.mean(axis=0))
                    rmse = math.sqrt(np.mean(np.sum((moved - ref_points) ** 2, axis=1)))
                    if rmse < best_rmse:
                        best_rmse = rmse
                        best_omega = center + np.array([dx, dy, dz])
        center = best_omega
        half_width /= 4.0
    return best_rmse


class TestKittiStats:
    def test_equal_trajectories_are_exactly_zero(self):
        trajectory = curved_trajectory(300, seed=0)
        stats = kitti_stats(trajectory, trajectory)
        assert stats.segments > 0
        assert stats.rotation_error == 0.0
        assert stats.translation_error == 0.0
        for entry in stats.per_length:
            assert entry.rotation_error == 0.0
            assert entry.translation_error == 0.0

    def test_straight_line_scale_is_one_percent_everywhere(self):
        # Truth advances 1 m/frame; the estimate advances 1.01 m/frame.  Every
        # segment of nominal length L ends exactly L frames after its start, so
        # the relative translation error is 0.01*L and the ratio is exactly 1%.
        truth = line_trajectory(1000)
        estimated = line_trajectory(1000, scale=1.01)
        stats = kitti_stats(estimated, truth)
        assert stats.rotation_error == 0.0
        assert stats.translation_error == pytest.approx(1.0, abs=1e-9)
        assert tuple(entry.length for entry in stats.per_length) == SEGMENT_LENGTHS
        for entry in stats.per_length:
            assert entry.translation_error == pytest.approx(1.0, abs=1e-9)
            assert entry.segments > 0

    def test_only_reachable_lengths_reported(self):
        truth = line_trajectory(351)  # 350 m of path
        stats = kitti_stats(line_trajectory(351, scale=1.01), truth)
        assert tuple(entry.length for entry in stats.per_length) == (100.0, 200.0, 300.0)

    def test_short_trajectory_gives_empty_stats(self):
        truth = line_trajectory(5)
        stats = kitti_stats(line_trajectory(5, scale=1.1), truth)
        assert stats.is_empty
        assert stats.segments == 0
        assert stats.per_length == ()
        assert math.isnan(stats.rotation_error)
        assert math.isnan(stats.translation_error)

    def test_invariant_under_shared_rigid_motion(self):
        truth = curved_trajectory(260, seed=1)
        estimated = perturbed(truth, seed=2)
        g = Pose(so3_exp(np.array([0.4, -1.1, 0.7])), np.array([55.0, -20.0, 8.0]))
        base = kitti_stats(estimated, truth)
        moved = kitti_stats(moved_by(estimated, g), moved_by(truth, g))
        assert moved.rotation_error == pytest.approx(base.rotation_error, abs=1e-9)
        assert moved.translation_error == pytest.approx(base.translation_error, abs=1e-9)

    def test_deterministic(self):
        truth = curved_trajectory(150, seed=3)
        estimated = perturbed(truth, seed=4)
        first = kitti_stats(estimated, truth)
        second = kitti_stats(estimated, truth)
        assert first.rotation_error == second.rotation_error
        assert first.translation_error == second.translation_error

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            kitti_stats(line_trajectory(9), line_trajectory(10))

    def test_single_frame_rejected(self):
        with pytest.raises(ValueError, match="two"):
            kitti_stats(line_trajectory(1), line_trajectory(1))


class TestAte:
    def test_equal_trajectories_near_zero(self):
        trajectory = curved_trajectory(120, seed=5)
        result = ate(trajectory, trajectory)
        assert result.translation_rmse < 1e-9
        assert result.rotation_rmse < 1e-9

    def test_rigid_offset_absorbed_by_alignment(self):
        truth = curved_trajectory(120, seed=6)
        g = Pose(so3_exp(np.array([-0.9, 0.3, 1.4])), np.array([12.0, 80.0, -5.0]))
        result = ate(moved_by(truth, g), truth)
        assert result.translation_rmse < 1e-9
        assert result.rotation_rmse < 1e-8
        # The reported alignment must be the inverse of the applied motion.
        residual = compose(result.alignment, g)
        np.testing.assert_allclose(residual.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(residual.translation, 0.0, atol=1e-6)

    def test_invariant_under_rigid_motion_of_estimate(self):
        truth = curved_trajectory(120, seed=7)
        estimated = perturbed(truth, seed=8)
        g = Pose(so3_exp(np.array([0.2, 0.5, -0.3])), np.array([-30.0, 4.0, 61.0]))
        base = ate(estimated, truth)
        moved = ate(moved_by(estimated, g), truth)
        assert moved.translation_rmse == pytest.approx(base.translation_rmse, abs=1e-9)
        assert moved.rotation_rmse == pytest.approx(base.rotation_rmse, abs=1e-9)

    def test_square_corner_displacement_matches_grid_search(self):
        # 40 poses around a 10 m square; one corner pushed 1 m out of plane.
        side = np.linspace(0.0, 10.0, 10, endpoint=False)
        corners = []
        for x in side:
            corners.append([x, 0.0, 0.0])
        for y in side:
            corners.append([10.0, y, 0.0])
        for x in side:
            corners.append([10.0 - x, 10.0, 0.0])
        for y in side:
            corners.append([0.0, 10.0 - y, 0.0])
        truth_points = np.asarray(corners)
        est_points = truth_points.copy()
        est_points[10] += np.array([0.0, 0.0, 1.0])
        truth = Trajectory.from_poses([Pose(np.eye(3), p) for p in truth_points])
        estimated = Trajectory.from_poses([Pose(np.eye(3), p) for p in est_points])
        result = ate(estimated, truth)
        oracle = grid_search_rmse(est_points, truth_points)
        assert result.translation_rmse == pytest.approx(oracle, abs=1e-3)

    def test_pure_rotation_noise_measured_in_degrees(self):
        # Positions identical, every rotation tilted by exactly 2 degrees:
        # alignment stays at identity and the rotation RMSE is 2.
        rng = np.random.default_rng(9)
        truth = curved_trajectory(80, seed=10)
        entries = []
        for index, pose in truth:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            tilt = so3_exp(np.deg2rad(2.0) * axis)
            entries.append((index, Pose(tilt @ pose.rotation, pose.translation)))
        result = ate(Trajectory(entries), truth)
        assert result.translation_rmse < 1e-9
        assert result.rotation_rmse == pytest.approx(2.0, abs=1e-9)

    def test_collinear_truth_rejected(self):
        line = line_trajectory(50)
        with pytest.raises(ValueError, match="collinear"):
            ate(perturbed(line, seed=11), line)

    def test_length_checks(self):
        with pytest.raises(ValueError, match="length"):
            ate(curved_trajectory(10, seed=12), curved_trajectory(11, seed=12))
        with pytest.raises(ValueError, match="three"):
            ate(line_trajectory(2), line_trajectory(2))

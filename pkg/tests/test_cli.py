"""End-to-end CLI runs against generated scan directories."""
import json

import numpy as np
import pytest
from click.testing import CliRunner

from voxicp.cli import main
from voxicp.config import RunConfig, write_run_config
from voxicp.kitti import Trajectory, write_trajectory
from voxicp.se3 import Pose, orthonormalize, so3_exp
from voxicp.synthetic import drive_sequence

N_FRAMES = 4


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A small scan directory plus its matching reference pose file."""
    root = tmp_path_factory.mktemp("seq")
    sequence = drive_sequence(seed=9, n_frames=N_FRAMES, points_per_frame=12000)
    for i, cloud in enumerate(sequence.clouds):
        records = np.column_stack(
            [cloud.points, np.zeros(len(cloud.points))]
        ).astype("<f4")
        (root / f"{i:06d}.bin").write_bytes(records.tobytes())
    truth = root / "poses.txt"
    write_trajectory(sequence.truth, truth)
    return root, truth


@pytest.fixture()
def runner():
    return CliRunner()


def curved_file(path, n=260, seed=0):
    rng = np.random.default_rng(seed)
    rotation = np.eye(3)
    position = np.zeros(3)
    poses = []
    for _ in range(n):
        poses.append(Pose(rotation.copy(), position.copy()))
        rotation = orthonormalize(rotation @ so3_exp(rng.normal(0.0, 0.02, 3)))
        position = position + rotation @ np.array([1.6, 0.0, 0.1 * rng.normal()])
    write_trajectory(Trajectory.from_poses(poses), path)
    return path


class TestOdometry:
    def test_three_frame_run_writes_outputs(self, dataset, runner, tmp_path):
        root, _ = dataset
        out = tmp_path / "out"
        result = runner.invoke(
            main,
            [
                "odometry",
                str(root),
                "--max-frames",
                "3",
                "--voxel-size",
                "3.0",
                "--output",
                str(out),
                "--dump-map",
            ],
        )
        assert result.exit_code == 0, result.output
        lines = (out / "trajectory.txt").read_text().strip().splitlines()
        assert len(lines) == 3
        assert lines[0] == "1 0 0 0 0 1 0 0 0 0 1 0"
        timing = json.loads((out / "timing.json").read_text())
        assert timing["frames"] == 3
        assert timing["fps"] > 0
        assert 0 < timing["reduction_ratio"] < 1
        assert len(timing["per_frame"]) == 3
        assert (out / "map.csv").read_text().startswith("x,y,z,count,")
        assert "fps:" in result.output

    def test_ground_truth_triggers_evaluation(self, dataset, runner, tmp_path):
        root, truth = dataset
        out = tmp_path / "out"
        result = runner.invoke(
            main,
            ["odometry", str(root), "--ground-truth", str(truth), "--output", str(out)],
        )
        assert result.exit_code == 0, result.output
        report = json.loads((out / "evaluation.json").read_text())
        # 4 frames cover a few meters: segment stats are unavailable, noted
        assert report["kitti"] is None
        assert "100" in report["kitti_note"]

    def test_config_file_supplies_settings_and_flags_win(self, dataset, runner, tmp_path):
        root, _ = dataset
        cfg = tmp_path / "run.cfg"
        write_run_config(RunConfig(max_frames=2), cfg)
        out1 = tmp_path / "a"
        result = runner.invoke(
            main, ["odometry", str(root), "--config", str(cfg), "--output", str(out1)]
        )
        assert result.exit_code == 0, result.output
        assert len((out1 / "trajectory.txt").read_text().strip().splitlines()) == 2

        out2 = tmp_path / "b"
        result = runner.invoke(
            main,
            [
                "odometry",
                str(root),
                "--config",
                str(cfg),
                "--max-frames",
                "3",
                "--output",
                str(out2),
            ],
        )
        assert result.exit_code == 0, result.output
        assert len((out2 / "trajectory.txt").read_text().strip().splitlines()) == 3

    def test_missing_dataset_fails_cleanly(self, runner, tmp_path):
        result = runner.invoke(main, ["odometry", str(tmp_path / "nope")])
        assert result.exit_code != 0
        assert "not a directory" in result.output

    def test_no_dataset_anywhere(self, runner):
        result = runner.invoke(main, ["odometry"])
        assert result.exit_code != 0
        assert "no dataset" in result.output

    def test_bad_flag_value(self, dataset, runner):
        root, _ = dataset
        result = runner.invoke(main, ["odometry", str(root), "--voxel-size", "-2"])
        assert result.exit_code != 0
        assert "voxel_size" in result.output


class TestEvaluate:
    def test_identical_files_report_zero(self, runner, tmp_path):
        path = curved_file(tmp_path / "traj.txt")
        result = runner.invoke(main, ["evaluate", str(path), str(path)])
        assert result.exit_code == 0, result.output
        assert "translation error: 0.0000 %" in result.output
        assert "rotation error:    0.0000 deg/100m" in result.output
        assert "ATE translation RMSE: 0.0000 m" in result.output

    def test_json_report(self, runner, tmp_path):
        path = curved_file(tmp_path / "traj.txt")
        report = tmp_path / "report.json"
        result = runner.invoke(
            main, ["evaluate", str(path), str(path), "--json", str(report)]
        )
        assert result.exit_code == 0, result.output
        body = json.loads(report.read_text())
        assert body["kitti"]["translation_error_percent"] == 0.0
        assert body["ate"]["translation_rmse_m"] < 1e-9

    def test_length_mismatch_surfaces_service_detail(self, runner, tmp_path):
        long = curved_file(tmp_path / "long.txt", n=40)
        short = curved_file(tmp_path / "short.txt", n=30)
        result = runner.invoke(main, ["evaluate", str(long), str(short)])
        assert result.exit_code != 0
        assert "lengths differ" in result.output


class TestBench:
    def test_reports_stage_table(self, dataset, runner, tmp_path):
        root, _ = dataset
        out = tmp_path / "bench"
        result = runner.invoke(
            main,
            ["bench", str(root), "--max-frames", "3", "--output", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert "stage" in result.output
        assert "voxelize" in result.output
        assert "register" in result.output
        assert "fuse" in result.output
        assert json.loads((out / "timing.json").read_text())["frames"] == 3


class TestVoxelSweep:
    def test_two_size_sweep_csv(self, dataset, runner, tmp_path):
        root, truth = dataset
        csv_path = tmp_path / "sweep.csv"
        result = runner.invoke(
            main,
            [
                "voxel-sweep",
                str(root),
                "--sizes",
                "3.0,6.0",
                "--max-frames",
                "3",
                "--ground-truth",
                str(truth),
                "--output",
                str(csv_path),
            ],
        )
        assert result.exit_code == 0, result.output
        lines = csv_path.read_text().strip().splitlines()
        assert (
            lines[0]
            == "voxel_size,total_time_s,fps,rot_err_deg_per_100m,trans_err_pct,reduction_ratio"
        )
        assert len(lines) == 3
        for line in lines[1:]:
            assert len(line.split(",")) == 6
        first = lines[1].split(",")
        assert float(first[0]) == 3.0
        assert float(first[2]) > 0  # fps
        assert first[3] == "nan"  # too short for segment errors
        assert 0 < float(first[5]) < 1

    def test_bad_sizes_rejected(self, dataset, runner):
        root, _ = dataset
        result = runner.invoke(main, ["voxel-sweep", str(root), "--sizes", "a,b"])
        assert result.exit_code != 0
        assert "bad --sizes" in result.output


class TestCheckDerivatives:
    def test_small_sweep_passes(self, runner):
        result = runner.invoke(main, ["check-derivatives", "-n", "6", "--seed", "3"])
        assert result.exit_code == 0, result.output
        assert "PASSED" in result.output
        assert "worst gradient deviation" in result.output


class TestServe:
    def test_help_only(self, runner):
        result = runner.invoke(main, ["serve", "--help"])
        assert result.exit_code == 0
        assert "--port" in result.output

"""HTTP service behavior, checked against the in-process library as oracle."""
import numpy as np
import pytest
from fastapi.testclient import TestClient

import voxicp
from voxicp.registration import PipelineConfig, run_odometry
from voxicp.se3 import Pose, log_map, so3_exp
from voxicp.service import create_app
from voxicp.synthetic import drive_sequence, room_scene


@pytest.fixture(scope="module")
def client():
    with TestClient(create_app()) as c:
        yield c


def frame_bytes(points: np.ndarray) -> bytes:
    records = np.column_stack([points, np.zeros(len(points))]).astype("<f4")
    return records.tobytes()


def as_float32_cloud(points: np.ndarray) -> np.ndarray:
    """What the service decodes from an uploaded frame of these points."""
    return points.astype("<f4").astype(np.float64)


def identity_rows():
    return [1.0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0]


def trajectory_rows(poses):
    return [Pose.matrix(p)[:3, :].reshape(12).tolist() for p in poses]


class TestHealthAndSessions:
    def test_health(self, client):
        body = client.get("/health").json()
        assert body == {"status": "ok", "version": voxicp.__version__}

    def test_create_echoes_settings(self, client):
        response = client.post(
            "/sessions", json={"voxel_size": 1.5, "cost": "gicp", "lambda": 1e-5}
        )
        assert response.status_code == 201
        body = response.json()
        assert body["settings"]["voxel_size"] == 1.5
        assert body["settings"]["cost"] == "gicp"
        assert body["settings"]["lambda"] == 1e-5
        client.delete(f"/sessions/{body['session_id']}")

    def test_create_with_no_body_uses_defaults(self, client):
        response = client.post("/sessions")
        assert response.status_code == 201
        assert response.json()["settings"]["voxel_size"] == 3.0
        client.delete(f"/sessions/{response.json()['session_id']}")

    def test_bad_settings_rejected(self, client):
        assert client.post("/sessions", json={"voxel_size": -1.0}).status_code == 422
        assert client.post("/sessions", json={"cost": "super-icp"}).status_code == 422

    def test_unknown_session_404(self, client):
        assert client.get("/sessions/deadbeef").status_code == 404
        assert client.delete("/sessions/deadbeef").status_code == 404
        assert client.post("/sessions/deadbeef/frames", content=b"").status_code == 404

    def test_lifecycle(self, client):
        sid = client.post("/sessions").json()["session_id"]
        assert sid in [s["session_id"] for s in client.get("/sessions").json()]
        status = client.get(f"/sessions/{sid}").json()
        assert status["frames"] == 0
        assert status["map_voxels"] == 0
        assert client.delete(f"/sessions/{sid}").status_code == 204
        assert client.get(f"/sessions/{sid}").status_code == 404


class TestFrames:
    def test_session_matches_batch_runner_exactly(self, client):
        sequence = drive_sequence(seed=5, n_frames=3, points_per_frame=15000)
        clouds = [as_float32_cloud(c.points) for c in sequence.clouds]
        expected = run_odometry(clouds, PipelineConfig(voxel_size=3.0))

        sid = client.post("/sessions", json={"voxel_size": 3.0}).json()["session_id"]
        got = []
        for cloud, frame in zip(sequence.clouds, range(3)):
            response = client.post(
                f"/sessions/{sid}/frames", content=frame_bytes(cloud.points)
            )
            assert response.status_code == 200
            body = response.json()
            assert body["frame_index"] == frame
            assert body["timing"]["voxelize_s"] >= 0.0
            got.append(np.asarray(body["pose"]["rows"]).reshape(3, 4))
        for pose_rows, (_, pose) in zip(got, expected.trajectory):
            np.testing.assert_array_equal(pose_rows, pose.matrix()[:3, :])

        status = client.get(f"/sessions/{sid}").json()
        assert status["frames"] == 3
        assert status["total_points"] == sum(len(c) for c in clouds)
        assert status["map_voxels"] == len(expected.map.finalized)
        assert status["fps"] > 0

        text = client.get(f"/sessions/{sid}/trajectory").text
        lines = text.strip().splitlines()
        assert len(lines) == 3
        assert lines[0] == "1 0 0 0 0 1 0 0 0 0 1 0"

        map_csv = client.get(f"/sessions/{sid}/map").text.strip().splitlines()
        assert map_csv[0].startswith("x,y,z,count,")
        assert len(map_csv) == 1 + len(expected.map.finalized)
        first = [float(v) for v in map_csv[1].split(",")]
        np.testing.assert_array_equal(first[:3], expected.map.finalized.means[0])
        client.delete(f"/sessions/{sid}")

    def test_truncated_frame_rejected(self, client):
        sid = client.post("/sessions").json()["session_id"]
        response = client.post(f"/sessions/{sid}/frames", content=b"\x00" * 21)
        assert response.status_code == 422
        assert "multiple" in response.json()["detail"]
        client.delete(f"/sessions/{sid}")

    def test_unknown_trajectory_format(self, client):
        sid = client.post("/sessions").json()["session_id"]
        response = client.get(f"/sessions/{sid}/trajectory", params={"fmt": "csv"})
        assert response.status_code == 422
        client.delete(f"/sessions/{sid}")


class TestRegistration:
    def test_recovers_known_motion(self, client):
        rng = np.random.default_rng(11)
        scene = room_scene(rng, points_per_face=6000)
        target = scene[rng.choice(len(scene), 30000, replace=False)]
        truth = Pose(so3_exp(np.array([0.01, -0.02, 0.03])), np.array([0.3, -0.2, 0.1]))
        source = truth.inverse().transform(target)
        response = client.post(
            "/registration",
            json={
                "source_points": source.tolist(),
                "target_points": target.tolist(),
                "settings": {"voxel_size": 1.0},
            },
        )
        assert response.status_code == 200
        body = response.json()
        assert not body["fell_back"]
        assert body["n_correspondences"] > 20
        pose = np.asarray(body["pose"]["rows"]).reshape(3, 4)
        recovered = Pose(pose[:, :3], pose[:, 3])
        # both sides are independently re-voxelized, so recovery carries a
        # discretization bias; the exact-copy accuracy bounds live elsewhere
        error = log_map(recovered @ truth.inverse())
        assert np.linalg.norm(error[:3]) < 0.01
        assert np.linalg.norm(error[3:]) < 0.02

    def test_ragged_points_rejected(self, client):
        response = client.post(
            "/registration",
            json={"source_points": [[1.0, 2.0]], "target_points": [[0.0, 0.0, 0.0]]},
        )
        assert response.status_code == 422


class TestEvaluate:
    def test_scaled_line_statistics(self, client):
        truth = [Pose(np.eye(3), np.array([float(i), 0, 0])) for i in range(1000)]
        scaled = [Pose(np.eye(3), np.array([1.01 * i, 0, 0])) for i in range(1000)]
        response = client.post(
            "/evaluate",
            json={
                "estimated": trajectory_rows(scaled),
                "reference": trajectory_rows(truth),
            },
        )
        assert response.status_code == 200
        body = response.json()
        assert body["kitti"]["translation_error_percent"] == pytest.approx(1.0, abs=1e-9)
        assert body["kitti"]["rotation_error_deg_per_100m"] == 0.0
        assert len(body["kitti"]["per_length"]) == 8
        # straight-line reference: alignment is ambiguous, signalled not fatal
        assert body["ate"] is None
        assert "collinear" in body["ate_note"]

    def test_short_trajectory_notes_kitti(self, client):
        rng = np.random.default_rng(3)
        truth = [
            Pose(np.eye(3), np.array([0.1 * i, 0.01 * i**1.5, 0.0])) for i in range(20)
        ]
        estimated = [
            Pose(p.rotation, p.translation + rng.normal(0, 0.01, 3)) for p in truth
        ]
        body = client.post(
            "/evaluate",
            json={
                "estimated": trajectory_rows(estimated),
                "reference": trajectory_rows(truth),
            },
        ).json()
        assert body["kitti"] is None
        assert "100" in body["kitti_note"]
        assert body["ate"]["translation_rmse_m"] < 0.05

    def test_length_mismatch_rejected(self, client):
        rows = trajectory_rows([Pose.identity()] * 3)
        response = client.post(
            "/evaluate", json={"estimated": rows, "reference": rows[:2]}
        )
        assert response.status_code == 422

    def test_non_orthonormal_rows_rejected(self, client):
        bad = [[2.0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0]] * 4
        response = client.post("/evaluate", json={"estimated": bad, "reference": bad})
        assert response.status_code == 422
        assert "orthonormal" in response.json()["detail"]


class TestDerivativeCheck:
    def test_sweep_passes(self, client):
        body = client.post(
            "/derivative-check", json={"configurations": 12, "seed": 7}
        ).json()
        assert body["configurations"] == 12
        assert body["passed"] is True
        assert body["worst_gradient_deviation"] <= body["gradient_tolerance"]
        assert body["worst_hessian_deviation"] <= body["hessian_tolerance"]

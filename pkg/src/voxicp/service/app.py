"""FastAPI application: odometry sessions plus stateless evaluators.

A session owns a persistent voxel map and pose state; each uploaded frame
runs one voxelize+register+fuse step inside the request handler, so the
reported timings measure the pipeline and nothing else.  Frames arrive as
raw little-endian float32 (x, y, z, reflectance) records, the same layout
as the on-disk scan files.
"""
import threading
from uuid import uuid4

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import PlainTextResponse

from .. import __version__
from ..evaluation import ate, kitti_stats
from ..kitti import TRAJECTORY_FORMATS, Trajectory, format_trajectory
from ..registration import (
    OdometryState,
    PipelineConfig,
    advance_odometry,
    fuse_scan,
    register_scan,
)
from ..se3 import Pose
from ..synthetic import derivative_validation_sweep
from ..voxel import voxelize
from .models import (
    AteModel,
    DerivativeCheckRequest,
    DerivativeCheckResponse,
    EvaluateRequest,
    EvaluateResponse,
    FrameResult,
    FrameTimingModel,
    HealthResponse,
    KittiStatsModel,
    LengthStatsModel,
    PipelineSettings,
    PoseModel,
    RegisterRequest,
    RegisterResponse,
    SessionCreated,
    SessionStatus,
    trajectory_from_rows,
)

_POINT_RECORD_BYTES = 16


class _Session:
    """One live odometry run: configuration, map, poses, and counters."""

    def __init__(self, session_id: str, settings: PipelineSettings):
        self.session_id = session_id
        self.settings = settings
        self.config: PipelineConfig = settings.run_config().pipeline()
        self.state = OdometryState.initial(self.config)
        self.entries: list[tuple[int, Pose]] = []
        self.fallback_frames: list[int] = []
        self.total_points = 0
        self.lock = threading.Lock()

    def status(self) -> SessionStatus:
        compute = sum(t.total_s for t in self.state.timing)
        return SessionStatus(
            session_id=self.session_id,
            frames=len(self.entries),
            map_voxels=len(self.state.map.finalized),
            total_points=self.total_points,
            fallback_frames=list(self.fallback_frames),
            compute_seconds=compute,
            fps=len(self.entries) / compute if compute > 0.0 else None,
        )


def _decode_frame(raw: bytes) -> np.ndarray:
    if len(raw) % _POINT_RECORD_BYTES != 0:
        raise HTTPException(
            status_code=422,
            detail=f"frame payload size {len(raw)} is not a multiple of {_POINT_RECORD_BYTES} bytes",
        )
    records = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    points = records[:, :3].astype(np.float64)
    return points[np.all(np.isfinite(points), axis=1)]


def create_app() -> FastAPI:
    app = FastAPI(
        title="voxicp",
        version=__version__,
        description="Voxelized Gaussian ICP registration and LiDAR odometry.",
    )
    sessions: dict[str, _Session] = {}
    registry_lock = threading.Lock()

    def session_or_404(session_id: str) -> _Session:
        try:
            return sessions[session_id]
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no session {session_id!r}") from None

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/sessions", response_model=SessionCreated, status_code=201)
    def create_session(settings: PipelineSettings | None = None) -> SessionCreated:
        settings = settings if settings is not None else PipelineSettings()
        session_id = uuid4().hex[:12]
        with registry_lock:
            sessions[session_id] = _Session(session_id, settings)
        return SessionCreated(session_id=session_id, settings=settings)

    @app.get("/sessions", response_model=list[SessionStatus])
    def list_sessions() -> list[SessionStatus]:
        with registry_lock:
            return [session.status() for session in sessions.values()]

    @app.get("/sessions/{session_id}", response_model=SessionStatus)
    def session_status(session_id: str) -> SessionStatus:
        return session_or_404(session_id).status()

    @app.delete("/sessions/{session_id}", status_code=204)
    def delete_session(session_id: str) -> None:
        session_or_404(session_id)
        with registry_lock:
            del sessions[session_id]

    @app.post("/sessions/{session_id}/frames", response_model=FrameResult)
    async def push_frame(session_id: str, request: Request) -> FrameResult:
        session = session_or_404(session_id)
        points = _decode_frame(await request.body())
        with session.lock:
            pose = advance_odometry(session.state, points, session.config)
            state = session.state
            session.entries.append((state.frame_index, pose))
            session.total_points += len(points)
            diag = state.last_registration
            if diag is not None and diag.fell_back:
                session.fallback_frames.append(state.frame_index)
            timing = state.timing[-1]
            return FrameResult(
                frame_index=state.frame_index,
                pose=PoseModel.from_pose(pose),
                timing=FrameTimingModel(
                    voxelize_s=timing.voxelize_s,
                    register_s=timing.register_s,
                    fuse_s=timing.fuse_s,
                ),
                fell_back=diag.fell_back if diag is not None else False,
                rounds=diag.rounds if diag is not None else None,
                n_correspondences=diag.n_correspondences if diag is not None else None,
                converged=diag.converged if diag is not None else None,
                map_voxels=len(state.map.finalized),
            )

    @app.get("/sessions/{session_id}/trajectory", response_class=PlainTextResponse)
    def session_trajectory(session_id: str, fmt: str = "kitti_3x4") -> str:
        if fmt not in TRAJECTORY_FORMATS:
            raise HTTPException(
                status_code=422,
                detail=f"unknown trajectory format {fmt!r}, choose from {list(TRAJECTORY_FORMATS)}",
            )
        session = session_or_404(session_id)
        with session.lock:
            return format_trajectory(Trajectory(session.entries), fmt)

    @app.get("/sessions/{session_id}/map", response_class=PlainTextResponse)
    def session_map(session_id: str) -> str:
        """World map as CSV: one finalized Gaussian per row."""
        session = session_or_404(session_id)
        with session.lock:
            grid = session.state.map.finalized
            lines = ["x,y,z,count,cov_xx,cov_xy,cov_xz,cov_yy,cov_yz,cov_zz"]
            for mean, cov, count in zip(grid.means, grid.covs, grid.counts):
                fields = [f"{v:.17g}" for v in mean] + [str(int(count))]
                fields += [
                    f"{cov[i, j]:.17g}" for i, j in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
                ]
                lines.append(",".join(fields))
            return "\n".join(lines) + "\n"

    @app.post("/registration", response_model=RegisterResponse)
    def registration(request: RegisterRequest) -> RegisterResponse:
        config = request.settings.run_config().pipeline()
        target = np.asarray(request.target_points, dtype=np.float64)
        source = np.asarray(request.source_points, dtype=np.float64)
        state = OdometryState.initial(config)
        fuse_scan(
            voxelize(target, config.voxel_size, config.min_points_per_voxel, reg=config.cost.lam),
            Pose.identity(),
            state.map,
        )
        initial = request.initial.to_pose() if request.initial is not None else Pose.identity()
        state.current_pose = initial
        state.previous_pose = initial
        try:
            grid = voxelize(
                source, config.voxel_size, config.min_points_per_voxel, reg=config.cost.lam
            )
            pose = register_scan(grid, state, config)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        diag = state.last_registration
        return RegisterResponse(
            pose=PoseModel.from_pose(pose),
            fell_back=diag.fell_back,
            rounds=diag.rounds,
            n_correspondences=diag.n_correspondences,
            converged=diag.converged,
        )

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate(request: EvaluateRequest) -> EvaluateResponse:
        try:
            estimated = trajectory_from_rows(request.estimated)
            reference = trajectory_from_rows(request.reference)
            stats = kitti_stats(estimated, reference)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        if stats.is_empty:
            kitti_model = None
            kitti_note = "reference path is shorter than the smallest segment length (100 m)"
        else:
            kitti_model = KittiStatsModel(
                rotation_error_deg_per_100m=stats.rotation_error,
                translation_error_percent=stats.translation_error,
                segments=stats.segments,
                per_length=[
                    LengthStatsModel(
                        length_m=entry.length,
                        rotation_error_deg_per_100m=entry.rotation_error,
                        translation_error_percent=entry.translation_error,
                        segments=entry.segments,
                    )
                    for entry in stats.per_length
                ],
            )
            kitti_note = None
        try:
            ate_result = ate(estimated, reference)
            ate_model = AteModel(
                rotation_rmse_deg=ate_result.rotation_rmse,
                translation_rmse_m=ate_result.translation_rmse,
                alignment=PoseModel.from_pose(ate_result.alignment),
            )
            ate_note = None
        except ValueError as exc:
            ate_model = None
            ate_note = str(exc)
        return EvaluateResponse(
            kitti=kitti_model, kitti_note=kitti_note, ate=ate_model, ate_note=ate_note
        )

    @app.post("/derivative-check", response_model=DerivativeCheckResponse)
    def derivative_check(request: DerivativeCheckRequest) -> DerivativeCheckResponse:
        reports = derivative_validation_sweep(
            configurations=request.configurations,
            seed=request.seed,
            fd_step=request.fd_step,
        )
        worst_grad = max(report.grad_deviation for report in reports)
        worst_hess = max(report.hess_deviation for report in reports)
        return DerivativeCheckResponse(
            configurations=len(reports),
            worst_gradient_deviation=worst_grad,
            worst_hessian_deviation=worst_hess,
            gradient_tolerance=request.gradient_tolerance,
            hessian_tolerance=request.hessian_tolerance,
            passed=worst_grad <= request.gradient_tolerance
            and worst_hess <= request.hessian_tolerance,
        )

    return app

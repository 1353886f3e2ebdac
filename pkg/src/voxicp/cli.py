"""Command-line front end.

Every command talks to the HTTP service: by default an in-process instance
(no server needed), or a remote one via ``--server URL``.  Scan files are
uploaded in their on-disk binary layout, and all reported frame timings are
measured inside the service next to the math, so transport and disk I/O
never pollute throughput numbers.
"""
import asyncio
import json
import math
import statistics
import threading
from pathlib import Path

import click
import httpx

from .config import RunConfig, read_run_config
from .kitti import TRAJECTORY_FORMATS, read_trajectory, sequence_frames
from .metrics import CostKind
from .registration import MotionModel
from .service import create_app
from .service.models import PipelineSettings


class _InProcessTransport(httpx.BaseTransport):
    """Drive the ASGI app from synchronous code without a socket."""

    def __init__(self, app):
        self._asgi = httpx.ASGITransport(app=app)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, daemon=True)
        self._thread.start()

    def _run(self, coro):
        return asyncio.run_coroutine_threadsafe(coro, self._loop).result()

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        response = self._run(self._asgi.handle_async_request(request))
        content = self._run(response.aread())
        return httpx.Response(
            status_code=response.status_code,
            headers=response.headers,
            content=content,
            request=request,
        )

    def close(self) -> None:
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join()
        self._loop.close()


class ServiceClient:
    """Thin HTTP wrapper raising ClickException on any service error."""

    def __init__(self, server: str | None = None):
        if server:
            self._client = httpx.Client(base_url=server.rstrip("/"), timeout=300.0)
        else:
            self._client = httpx.Client(
                transport=_InProcessTransport(create_app()),
                base_url="http://voxicp.internal",
                timeout=None,
            )

    def close(self) -> None:
        self._client.close()

    def call(self, method: str, path: str, **kwargs) -> httpx.Response:
        try:
            response = self._client.request(method, path, **kwargs)
        except httpx.HTTPError as exc:
            raise click.ClickException(f"service request failed: {exc}") from None
        if response.status_code >= 400:
            raise click.ClickException(_error_text(response))
        return response


def _error_text(response: httpx.Response) -> str:
    try:
        detail = response.json()["detail"]
    except Exception:
        return f"service returned {response.status_code}: {response.text[:200]}"
    if isinstance(detail, list):  # pydantic validation report
        parts = []
        for item in detail:
            location = ".".join(str(p) for p in item.get("loc", []))
            parts.append(f"{location}: {item.get('msg', '')}")
        detail = "; ".join(parts)
    return f"service returned {response.status_code}: {detail}"


_PIPELINE_OPTIONS = [
    click.option("--voxel-size", type=float, default=None, help="Grid cell edge in meters."),
    click.option(
        "--cost",
        type=click.Choice([kind.value for kind in CostKind]),
        default=None,
        help="Registration cost formula.",
    ),
    click.option("--sigma-icp", type=float, default=None, help="Point-error weight scale."),
    click.option("--sigma-cov", type=float, default=None, help="Shape-error weight scale."),
    click.option("--lambda", "lam", type=float, default=None, help="Covariance regularizer."),
    click.option(
        "--max-corr-dist",
        "max_correspondence_distance",
        type=float,
        default=None,
        help="Correspondence gate in meters (default: twice the voxel size).",
    ),
    click.option("--max-iters", "max_iterations", type=int, default=None, help="Solver iteration cap."),
    click.option(
        "--motion-model",
        type=click.Choice([model.value for model in MotionModel]),
        default=None,
        help="Initial guess between frames.",
    ),
    click.option("--min-points", "min_points_per_voxel", type=int, default=None, help="Cell finalization count."),
    click.option("--max-rounds", type=int, default=None, help="Match/solve rounds per frame."),
    click.option("--max-map-voxels", type=int, default=None, help="Map cell cap."),
    click.option("--step-tol", "step_norm_tolerance", type=float, default=None, help="Solver convergence step norm."),
    click.option("--hessian-reg", "hessian_regularization", type=float, default=None, help="Curvature floor."),
    click.option("--max-step-norm", type=float, default=None, help="Per-iteration step clamp."),
    click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        default=None,
        help="Key=value config file; flags override its values.",
    ),
]


def pipeline_options(command):
    for option in reversed(_PIPELINE_OPTIONS):
        command = option(command)
    return command


def build_run_config(config_path: Path | None, **overrides) -> RunConfig:
    config = read_run_config(config_path) if config_path else RunConfig()
    changes = {}
    for field, value in overrides.items():
        if value is None:
            continue
        if field == "cost":
            value = CostKind(value)
        elif field == "motion_model":
            value = MotionModel(value)
        changes[field] = value
    try:
        updated = config.updated(**changes)
        updated.pipeline()  # validate early, before any network round trip
    except ValueError as exc:
        raise click.ClickException(str(exc)) from None
    return updated


def _settings_json(config: RunConfig) -> dict:
    return PipelineSettings.from_run_config(config).model_dump(by_alias=True)


def _frame_paths(dataset: Path, max_frames: int | None) -> list[Path]:
    try:
        paths = sequence_frames(dataset)
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc)) from None
    if not paths:
        raise click.ClickException(f"no .bin frames found in {dataset}")
    if max_frames is not None:
        if max_frames < 1:
            raise click.ClickException("--max-frames must be at least 1")
        paths = paths[:max_frames]
    return paths


def _run_session(
    client: ServiceClient,
    config: RunConfig,
    frame_paths: list[Path],
    progress_every: int = 50,
) -> dict:
    """Push every frame through one service session; return run summary."""
    created = client.call("POST", "/sessions", json=_settings_json(config)).json()
    session_id = created["session_id"]
    per_frame = []
    try:
        for i, path in enumerate(frame_paths):
            result = client.call(
                "POST",
                f"/sessions/{session_id}/frames",
                content=path.read_bytes(),
                headers={"content-type": "application/octet-stream"},
            ).json()
            per_frame.append(result)
            if progress_every and (i + 1) % progress_every == 0:
                compute = sum(
                    f["timing"]["voxelize_s"] + f["timing"]["register_s"] + f["timing"]["fuse_s"]
                    for f in per_frame
                )
                fps = (i + 1) / compute if compute > 0 else float("inf")
                click.echo(f"  frame {i + 1}/{len(frame_paths)}  ({fps:.1f} FPS)", err=True)
        status = client.call("GET", f"/sessions/{session_id}").json()
        trajectory_text = client.call(
            "GET",
            f"/sessions/{session_id}/trajectory",
            params={"fmt": config.trajectory_format},
        ).text
        map_csv = client.call("GET", f"/sessions/{session_id}/map").text
    finally:
        try:
            client.call("DELETE", f"/sessions/{session_id}")
        except click.ClickException:
            pass  # keep the original failure visible
    return {
        "status": status,
        "frames": per_frame,
        "trajectory_text": trajectory_text,
        "map_csv": map_csv,
    }


def _timing_payload(run: dict) -> dict:
    status = run["status"]
    compute = status["compute_seconds"]
    frames = len(run["frames"])
    return {
        "frames": frames,
        "total_points": status["total_points"],
        "map_voxels": status["map_voxels"],
        "compute_seconds": compute,
        "fps": frames / compute if compute > 0 else None,
        "reduction_ratio": (
            status["map_voxels"] / status["total_points"] if status["total_points"] else None
        ),
        "fallback_frames": status["fallback_frames"],
        "per_frame": [
            {
                "frame": f["frame_index"],
                "voxelize_s": f["timing"]["voxelize_s"],
                "register_s": f["timing"]["register_s"],
                "fuse_s": f["timing"]["fuse_s"],
                "total_s": f["timing"]["voxelize_s"]
                + f["timing"]["register_s"]
                + f["timing"]["fuse_s"],
            }
            for f in run["frames"]
        ],
    }


def _evaluate_rows(client: ServiceClient, estimated_rows, reference_rows) -> dict:
    return client.call(
        "POST",
        "/evaluate",
        json={"estimated": estimated_rows, "reference": reference_rows},
    ).json()


def _trajectory_file_rows(path: Path, fmt: str) -> list[list[float]]:
    try:
        trajectory = read_trajectory(path, fmt)
    except (ValueError, OSError) as exc:
        raise click.ClickException(str(exc)) from None
    return [pose.matrix()[:3, :].reshape(12).tolist() for _, pose in trajectory]


def _print_evaluation(body: dict) -> None:
    kitti = body.get("kitti")
    if kitti is None:
        click.echo(f"segment errors: unavailable ({body.get('kitti_note')})")
    else:
        click.echo(f"segments evaluated: {kitti['segments']}")
        click.echo(f"translation error: {kitti['translation_error_percent']:.4f} %")
        click.echo(f"rotation error:    {kitti['rotation_error_deg_per_100m']:.4f} deg/100m")
        for entry in kitti["per_length"]:
            click.echo(
                f"  {entry['length_m']:5.0f} m: {entry['translation_error_percent']:.4f} % / "
                f"{entry['rotation_error_deg_per_100m']:.4f} deg/100m  (n={entry['segments']})"
            )
    ate = body.get("ate")
    if ate is None:
        click.echo(f"ATE: unavailable ({body.get('ate_note')})")
    else:
        click.echo(f"ATE translation RMSE: {ate['translation_rmse_m']:.4f} m")
        click.echo(f"ATE rotation RMSE:    {ate['rotation_rmse_deg']:.4f} deg")


@click.group()
def main() -> None:
    """Voxelized Gaussian registration and LiDAR odometry."""


@main.command()
@click.argument("dataset", type=click.Path(path_type=Path), required=False)
@pipeline_options
@click.option("--output", type=click.Path(path_type=Path), default=None, help="Output directory.")
@click.option("--ground-truth", type=click.Path(path_type=Path), default=None, help="Reference pose file.")
@click.option("--max-frames", type=int, default=None, help="Process only the first N frames.")
@click.option(
    "--format",
    "trajectory_format",
    type=click.Choice(TRAJECTORY_FORMATS),
    default=None,
    help="Trajectory file format.",
)
@click.option("--dump-map", is_flag=True, help="Also write the world map as CSV.")
@click.option("--server", default=None, help="Remote service URL (default: run in-process).")
def odometry(dataset, config_path, output, ground_truth, max_frames, trajectory_format, dump_map, server, **pipeline):
    """Estimate a trajectory from a directory of .bin scans."""
    config = build_run_config(
        config_path,
        dataset_dir=dataset,
        output_dir=output,
        ground_truth=ground_truth,
        max_frames=max_frames,
        trajectory_format=trajectory_format,
        **pipeline,
    )
    if config.dataset_dir is None:
        raise click.ClickException("no dataset directory given (argument or config dataset_dir)")
    try:
        config.validate_paths()
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc)) from None
    out_dir = Path(config.output_dir) if config.output_dir is not None else Path("voxicp-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    frame_paths = _frame_paths(Path(config.dataset_dir), config.max_frames)

    client = ServiceClient(server)
    try:
        run = _run_session(client, config, frame_paths)
        trajectory_path = out_dir / "trajectory.txt"
        trajectory_path.write_text(run["trajectory_text"])
        timing = _timing_payload(run)
        (out_dir / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
        if dump_map:
            (out_dir / "map.csv").write_text(run["map_csv"])
        click.echo(f"frames:          {timing['frames']}")
        click.echo(f"map voxels:      {timing['map_voxels']}")
        click.echo(f"compute seconds: {timing['compute_seconds']:.3f}")
        click.echo(f"fps:             {timing['fps']:.2f}")
        if timing["reduction_ratio"] is not None:
            click.echo(f"reduction ratio: {timing['reduction_ratio']:.6f}")
        if timing["fallback_frames"]:
            click.echo(f"fallback frames: {timing['fallback_frames']}")
        click.echo(f"trajectory: {trajectory_path}")

        if config.ground_truth is not None and config.evaluate:
            estimated_rows = _trajectory_file_rows(trajectory_path, config.trajectory_format)
            reference_rows = _trajectory_file_rows(Path(config.ground_truth), "kitti_3x4")
            if len(reference_rows) < len(estimated_rows):
                raise click.ClickException(
                    f"ground truth has {len(reference_rows)} poses but {len(estimated_rows)} frames were run"
                )
            body = _evaluate_rows(client, estimated_rows, reference_rows[: len(estimated_rows)])
            (out_dir / "evaluation.json").write_text(json.dumps(body, indent=2) + "\n")
            _print_evaluation(body)
    finally:
        client.close()


@main.command()
@click.argument("estimated", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("reference", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "--format",
    "trajectory_format",
    type=click.Choice(TRAJECTORY_FORMATS),
    default="kitti_3x4",
    help="Format of both input files.",
)
@click.option("--json", "json_path", type=click.Path(path_type=Path), default=None, help="Also write the full report as JSON.")
@click.option("--server", default=None, help="Remote service URL (default: run in-process).")
def evaluate(estimated, reference, trajectory_format, json_path, server):
    """Compare two trajectory files: segment errors and ATE."""
    estimated_rows = _trajectory_file_rows(estimated, trajectory_format)
    reference_rows = _trajectory_file_rows(reference, trajectory_format)
    client = ServiceClient(server)
    try:
        body = _evaluate_rows(client, estimated_rows, reference_rows)
    finally:
        client.close()
    if json_path is not None:
        json_path.write_text(json.dumps(body, indent=2) + "\n")
    _print_evaluation(body)


@main.command()
@click.argument("dataset", type=click.Path(exists=True, file_okay=False, path_type=Path))
@pipeline_options
@click.option("--max-frames", type=int, default=None, help="Process only the first N frames.")
@click.option("--output", type=click.Path(path_type=Path), default=None, help="Write timing.json here.")
@click.option("--server", default=None, help="Remote service URL (default: run in-process).")
def bench(dataset, config_path, max_frames, output, server, **pipeline):
    """Run odometry and report per-stage timing statistics."""
    config = build_run_config(config_path, max_frames=max_frames, **pipeline)
    frame_paths = _frame_paths(dataset, config.max_frames)
    client = ServiceClient(server)
    try:
        run = _run_session(client, config, frame_paths)
    finally:
        client.close()
    timing = _timing_payload(run)
    if output is not None:
        output.mkdir(parents=True, exist_ok=True)
        (output / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")

    stages = ("voxelize_s", "register_s", "fuse_s")
    samples = {stage: [f[stage] for f in timing["per_frame"]] for stage in stages}
    total = sum(sum(v) for v in samples.values())
    click.echo(f"frames: {timing['frames']}   compute: {timing['compute_seconds']:.3f} s   fps: {timing['fps']:.2f}")
    click.echo(f"{'stage':<10} {'share':<22} {'mean ms':>9} {'p50 ms':>9} {'p90 ms':>9} {'max ms':>9}")
    for stage in stages:
        values = sorted(samples[stage])
        share = sum(values) / total if total > 0 else 0.0
        bar = "#" * round(share * 20)
        mean_ms = 1e3 * statistics.fmean(values)
        p50 = 1e3 * values[int(0.50 * (len(values) - 1))]
        p90 = 1e3 * values[int(0.90 * (len(values) - 1))]
        click.echo(
            f"{stage[:-2]:<10} {bar:<15} {100 * share:5.1f}% {mean_ms:9.3f} {p50:9.3f} {p90:9.3f} {1e3 * values[-1]:9.3f}"
        )


@main.command("voxel-sweep")
@click.argument("dataset", type=click.Path(exists=True, file_okay=False, path_type=Path))
@pipeline_options
@click.option("--sizes", default="0.5,1.0,2.0,3.0,6.0,10.0", show_default=True, help="Comma-separated voxel sizes.")
@click.option("--ground-truth", type=click.Path(path_type=Path), default=None, help="Reference pose file.")
@click.option("--max-frames", type=int, default=None, help="Process only the first N frames.")
@click.option(
    "--output",
    type=click.Path(path_type=Path),
    default=Path("voxel_sweep.csv"),
    show_default=True,
    help="CSV output path.",
)
@click.option("--server", default=None, help="Remote service URL (default: run in-process).")
def voxel_sweep(dataset, config_path, sizes, ground_truth, max_frames, output, server, **pipeline):
    """Repeat odometry over a list of voxel sizes and emit a trend CSV."""
    try:
        size_list = [float(s) for s in sizes.split(",") if s.strip()]
    except ValueError:
        raise click.ClickException(f"bad --sizes value: {sizes!r}") from None
    if not size_list:
        raise click.ClickException("--sizes is empty")
    base = build_run_config(config_path, ground_truth=ground_truth, max_frames=max_frames, **pipeline)
    try:
        base.validate_paths()
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc)) from None
    frame_paths = _frame_paths(dataset, base.max_frames)
    reference_rows = (
        _trajectory_file_rows(Path(base.ground_truth), "kitti_3x4")
        if base.ground_truth is not None
        else None
    )

    client = ServiceClient(server)
    rows = []
    try:
        for size in size_list:
            # an unset correspondence gate stays unset and re-derives as twice
            # each swept size; an explicit gate is honored across the sweep
            config = base.updated(voxel_size=size, trajectory_format="kitti_3x4")
            run = _run_session(client, config, frame_paths, progress_every=0)
            timing = _timing_payload(run)
            rot_err = trans_err = float("nan")
            if reference_rows is not None:
                estimated_rows = [
                    [float(v) for v in line.split()]
                    for line in run["trajectory_text"].splitlines()
                ]
                body = _evaluate_rows(
                    client, estimated_rows, reference_rows[: len(estimated_rows)]
                )
                if body.get("kitti") is not None:
                    rot_err = body["kitti"]["rotation_error_deg_per_100m"]
                    trans_err = body["kitti"]["translation_error_percent"]
            row = (
                size,
                timing["compute_seconds"],
                timing["fps"],
                rot_err,
                trans_err,
                timing["reduction_ratio"],
            )
            rows.append(row)
            click.echo(
                f"voxel {size:g} m: fps {timing['fps']:.1f}, reduction {timing['reduction_ratio']:.6f}",
                err=True,
            )
    finally:
        client.close()

    lines = ["voxel_size,total_time_s,fps,rot_err_deg_per_100m,trans_err_pct,reduction_ratio"]
    for row in rows:
        lines.append(
            ",".join("nan" if isinstance(v, float) and math.isnan(v) else f"{v:.6g}" for v in row)
        )
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_text("\n".join(lines) + "\n")
    click.echo(f"wrote {output}")


@main.command("check-derivatives")
@click.option("--configurations", "-n", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--fd-step", type=float, default=1e-6, show_default=True)
@click.option("--gradient-tolerance", type=float, default=1e-5, show_default=True)
@click.option("--hessian-tolerance", type=float, default=1e-4, show_default=True)
@click.option("--server", default=None, help="Remote service URL (default: run in-process).")
def check_derivatives_command(configurations, seed, fd_step, gradient_tolerance, hessian_tolerance, server):
    """Compare analytic solver derivatives against finite differences."""
    client = ServiceClient(server)
    try:
        body = client.call(
            "POST",
            "/derivative-check",
            json={
                "configurations": configurations,
                "seed": seed,
                "fd_step": fd_step,
                "gradient_tolerance": gradient_tolerance,
                "hessian_tolerance": hessian_tolerance,
            },
        ).json()
    finally:
        client.close()
    click.echo(f"configurations:          {body['configurations']}")
    click.echo(
        f"worst gradient deviation: {body['worst_gradient_deviation']:.3e} (tolerance {body['gradient_tolerance']:.0e})"
    )
    click.echo(
        f"worst hessian deviation:  {body['worst_hessian_deviation']:.3e} (tolerance {body['hessian_tolerance']:.0e})"
    )
    if not body["passed"]:
        raise click.ClickException("derivative check FAILED")
    click.echo("derivative check PASSED")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()

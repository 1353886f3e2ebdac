"""Run configuration: a flat key=value file mirrored by CLI flags.

`RunConfig` keeps every knob as a plain scalar so a config file, a CLI
override, and a service request all speak the same names.  The nested
pipeline/cost/solver dataclasses are built on demand by :meth:`RunConfig.pipeline`,
which is also where value validation lives.
"""
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .kitti import TRAJECTORY_FORMATS
from .metrics import CostKind, CostParams
from .optimizer import NewtonConfig
from .registration import MotionModel, PipelineConfig

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass(frozen=True)
class RunConfig:
    """Everything an odometry run needs, flattened to scalar fields.

    ``max_correspondence_distance=None`` means "twice the voxel size";
    ``max_map_voxels``/``max_frames`` ``None`` means unlimited.  Paths stay
    optional because most commands take them as arguments instead.
    """

    voxel_size: float = 3.0
    cost: CostKind = CostKind.LITAMIN2_ICP_COV
    lam: float = 1e-6
    sigma_icp: float = 0.5
    sigma_cov: float = 3.0
    max_correspondence_distance: float | None = None
    motion_model: MotionModel = MotionModel.CONSTANT_VELOCITY
    min_points_per_voxel: int = 6
    max_rounds: int = 5
    max_map_voxels: int | None = None
    max_iterations: int = 30
    step_norm_tolerance: float = 1e-6
    hessian_regularization: float = 1e-9
    max_step_norm: float = 1.0
    dataset_dir: Path | None = None
    ground_truth: Path | None = None
    output_dir: Path | None = None
    max_frames: int | None = None
    evaluate: bool = True
    trajectory_format: str = "kitti_3x4"

    def pipeline(self) -> PipelineConfig:
        """Build the nested pipeline configuration (validates all values)."""
        return PipelineConfig(
            voxel_size=self.voxel_size,
            cost=CostParams(
                kind=self.cost,
                lam=self.lam,
                sigma_icp=self.sigma_icp,
                sigma_cov=self.sigma_cov,
            ),
            newton=NewtonConfig(
                max_iterations=self.max_iterations,
                step_norm_tolerance=self.step_norm_tolerance,
                hessian_regularization=self.hessian_regularization,
                max_step_norm=self.max_step_norm,
            ),
            max_correspondence_distance=self.max_correspondence_distance,
            motion_model=self.motion_model,
            min_points_per_voxel=self.min_points_per_voxel,
            max_rounds=self.max_rounds,
            max_map_voxels=self.max_map_voxels,
        )

    def validate_paths(self) -> None:
        """Check that configured input paths exist before a run starts."""
        if self.dataset_dir is not None and not Path(self.dataset_dir).is_dir():
            raise FileNotFoundError(f"dataset_dir is not a directory: {self.dataset_dir}")
        if self.ground_truth is not None and not Path(self.ground_truth).is_file():
            raise FileNotFoundError(f"ground_truth file not found: {self.ground_truth}")

    def updated(self, **changes) -> "RunConfig":
        """Copy with the given fields replaced (None values meaning "unset"
        must be passed explicitly; absent keys keep their current value)."""
        return dataclasses.replace(self, **changes)


def _parse_float(key: str, text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"{key}: expected a number, got {text!r}") from None


def _parse_int(key: str, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ValueError(f"{key}: expected an integer, got {text!r}") from None


def _parse_bool(key: str, text: str) -> bool:
    lowered = text.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"{key}: expected true/false, got {text!r}")


def _parse_cost(key: str, text: str) -> CostKind:
    try:
        return CostKind(text)
    except ValueError:
        choices = ", ".join(kind.value for kind in CostKind)
        raise ValueError(f"{key}: expected one of {choices}, got {text!r}") from None


def _parse_motion(key: str, text: str) -> MotionModel:
    try:
        return MotionModel(text)
    except ValueError:
        choices = ", ".join(model.value for model in MotionModel)
        raise ValueError(f"{key}: expected one of {choices}, got {text!r}") from None


def _parse_format(key: str, text: str) -> str:
    if text not in TRAJECTORY_FORMATS:
        raise ValueError(
            f"{key}: expected one of {', '.join(TRAJECTORY_FORMATS)}, got {text!r}"
        )
    return text


def _optional(parser, sentinel: str):
    def parse(key: str, text: str):
        if text.lower() == sentinel:
            return None
        return parser(key, text)

    return parse


# file/CLI key -> (RunConfig field, parser). "lambda" keeps the conventional
# spelling in files and flags; the dataclass field is `lam` (reserved word).
_KEY_TABLE = {
    "voxel_size": ("voxel_size", _parse_float),
    "cost": ("cost", _parse_cost),
    "lambda": ("lam", _parse_float),
    "sigma_icp": ("sigma_icp", _parse_float),
    "sigma_cov": ("sigma_cov", _parse_float),
    "max_correspondence_distance": (
        "max_correspondence_distance",
        _optional(_parse_float, "auto"),
    ),
    "motion_model": ("motion_model", _parse_motion),
    "min_points_per_voxel": ("min_points_per_voxel", _parse_int),
    "max_rounds": ("max_rounds", _parse_int),
    "max_map_voxels": ("max_map_voxels", _optional(_parse_int, "none")),
    "max_iterations": ("max_iterations", _parse_int),
    "step_norm_tolerance": ("step_norm_tolerance", _parse_float),
    "hessian_regularization": ("hessian_regularization", _parse_float),
    "max_step_norm": ("max_step_norm", _parse_float),
    "dataset_dir": ("dataset_dir", lambda _key, text: Path(text)),
    "ground_truth": ("ground_truth", lambda _key, text: Path(text)),
    "output_dir": ("output_dir", lambda _key, text: Path(text)),
    "max_frames": ("max_frames", _optional(_parse_int, "none")),
    "evaluate": ("evaluate", _parse_bool),
    "trajectory_format": ("trajectory_format", _parse_format),
}


def parse_config_text(text: str, *, source: str = "<config>") -> dict[str, str]:
    """Split ``key = value`` lines into a mapping.

    ``#`` starts a comment (whole line or trailing); blank lines are skipped;
    duplicate keys are rejected so a typo cannot silently lose a setting.
    """
    mapping: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep or not key or not value:
            raise ValueError(f"{source} line {line_no}: expected 'key = value', got {raw.strip()!r}")
        if key in mapping:
            raise ValueError(f"{source} line {line_no}: duplicate key {key!r}")
        mapping[key] = value
    return mapping


def run_config_from_mapping(mapping: dict[str, str], *, source: str = "<config>") -> RunConfig:
    changes: dict[str, object] = {}
    for key, text in mapping.items():
        try:
            field, parser = _KEY_TABLE[key]
        except KeyError:
            raise ValueError(f"{source}: unknown config key {key!r}") from None
        try:
            changes[field] = parser(key, text)
        except ValueError as exc:
            raise ValueError(f"{source}: {exc}") from None
    return RunConfig(**changes)


def read_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    return run_config_from_mapping(
        parse_config_text(text, source=str(path)), source=str(path)
    )


def _render(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (CostKind, MotionModel)):
        return value.value
    return str(value)


def write_run_config(config: RunConfig, path: str | Path) -> None:
    """Write a config file that reads back equal to ``config``."""
    lines = ["# odometry pipeline"]
    for key in (
        "voxel_size",
        "cost",
        "lambda",
        "sigma_icp",
        "sigma_cov",
        "max_correspondence_distance",
        "motion_model",
        "min_points_per_voxel",
        "max_rounds",
        "max_map_voxels",
    ):
        lines.append(_render_entry(config, key))
    lines.append("")
    lines.append("# newton solver")
    for key in (
        "max_iterations",
        "step_norm_tolerance",
        "hessian_regularization",
        "max_step_norm",
    ):
        lines.append(_render_entry(config, key))
    lines.append("")
    lines.append("# run")
    for key in ("evaluate", "trajectory_format", "max_frames"):
        lines.append(_render_entry(config, key))
    for key in ("dataset_dir", "ground_truth", "output_dir"):
        if getattr(config, _KEY_TABLE[key][0]) is not None:
            lines.append(_render_entry(config, key))
    Path(path).write_text("\n".join(lines) + "\n")


def _render_entry(config: RunConfig, key: str) -> str:
    field, _ = _KEY_TABLE[key]
    value = getattr(config, field)
    if value is None:
        value = "auto" if key == "max_correspondence_distance" else "none"
    return f"{key} = {_render(value)}"

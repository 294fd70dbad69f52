# ============================================
# core/config.py
# ============================================
"""
Run configuration: dataclasses with the documented defaults, loaded from TOML
or JSON and overridable with ``section.key=value`` strings.
"""
import dataclasses
import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field

from fisheye_splat.core.errors import ConfigError
from fisheye_splat.core.log_utils import get_logger

logger = get_logger(__name__)


def _require(cond: bool, name: str, message: str):
    if not cond:
        raise ConfigError(f"{name}: {message}")


@dataclass
class LearningRates:
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    # 0 means "decay over the whole run"
    position_decay_steps: int = 0
    scaling: float = 1e-3
    rotation: float = 1e-3
    sh: float = 2.5e-3
    opacity: float = 5e-2
    semantic: float = 2.5e-3
    intensity: float = 2.5e-3
    appearance: float = 1e-3

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name == "position_decay_steps":
                _require(self.position_decay_steps >= 0, "train.lr.position_decay_steps", "must be >= 0")
            else:
                _require(getattr(self, f.name) > 0, f"train.lr.{f.name}", "learning rates must be > 0")


@dataclass
class LossWeights:
    lambda_rgb: float = 0.2
    depth: float = 1.0
    normal: float = 1.0
    semantic: float = 0.01
    reg: float = 0.01
    lidar: float = 0.1

    def __post_init__(self):
        _require(0.0 <= self.lambda_rgb <= 1.0, "train.weights.lambda_rgb", "must lie in [0, 1]")
        for f in dataclasses.fields(self):
            _require(getattr(self, f.name) >= 0, f"train.weights.{f.name}", "weights must be >= 0")


@dataclass
class TrainConfig:
    iterations: int = 2000
    seed: int = 0
    sh_degree: int = 3
    densify_from: int = 500
    densify_interval: int = 100
    # 0 disables the upper bound
    densify_until: int = 0
    dead_opacity: float = 0.005
    log_interval: int = 100
    record_wall_time: bool = False
    use_depth: bool = True
    use_normal: bool = True
    use_semantic: bool = True
    use_lidar: bool = False
    sky_gaussians: int = 1000
    sky_radius: float = 200.0
    object_gaussians: int = 200
    lr: LearningRates = field(default_factory=LearningRates)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        _require(self.iterations >= 0, "train.iterations", "must be >= 0")
        _require(0 <= self.sh_degree <= 3, "train.sh_degree", "must lie in 0..3")
        _require(self.densify_interval >= 1, "train.densify_interval", "must be >= 1")
        _require(0.0 < self.dead_opacity < 1.0, "train.dead_opacity", "must lie in (0, 1)")
        _require(self.log_interval >= 1, "train.log_interval", "must be >= 1")
        _require(self.seed >= 0, "train.seed", "must be a non-negative integer")
        _require(self.sky_gaussians >= 0, "train.sky_gaussians", "must be >= 0")
        _require(self.sky_radius >= 100.0, "train.sky_radius", "must be >= 100 m")
        _require(self.object_gaussians >= 1, "train.object_gaussians", "must be >= 1")


@dataclass
class RenderConfig:
    stretch_tangential: bool = True
    stretch_polar: bool = True
    order: int = 1
    background: tuple = (0.0, 0.0, 0.0)
    threads: int = 1
    near: float = 0.05

    def __post_init__(self):
        _require(self.order in (1, 2), "render.order", "must be 1 or 2")
        _require(self.threads >= 1, "render.threads", "must be >= 1")
        _require(len(self.background) == 3, "render.background", "needs 3 values")
        _require(self.near > 0, "render.near", "must be > 0")
        self.background = tuple(float(v) for v in self.background)


@dataclass
class LidarConfig:
    fov_deg: float = 100.0
    pitch_deg: float = 45.0
    resolution: int = 256
    alpha_threshold: float = 0.5

    def __post_init__(self):
        _require(0.0 < self.fov_deg < 170.0, "lidar.fov_deg", "must lie in (0, 170)")
        _require(0.0 <= self.pitch_deg <= 90.0, "lidar.pitch_deg", "must lie in [0, 90]")
        _require(self.resolution >= 8, "lidar.resolution", "must be >= 8")
        _require(0.0 <= self.alpha_threshold <= 1.0, "lidar.alpha_threshold", "must lie in [0, 1]")


@dataclass
class EvaluationConfig:
    zone_band: float = 0.25
    zone_c_low: float = 0.75
    reference_max_deg: float = 70.0
    fill_value: float = 0.0

    def __post_init__(self):
        _require(0.0 < self.zone_band <= 1.0, "evaluation.zone_band", "must lie in (0, 1]")
        _require(0.0 <= self.zone_c_low < 1.0, "evaluation.zone_c_low", "must lie in [0, 1)")
        _require(0.0 < self.reference_max_deg < 90.0, "evaluation.reference_max_deg", "must lie in (0, 90)")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)


# ---------------------------------------------------------------------------
# building from plain dicts
# ---------------------------------------------------------------------------

def _coerce(value, default, name: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name}: expected a list of numbers, got {value!r}")
        return tuple(float(v) for v in value)
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix}: expected a table/object")
    defaults = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"{name}: unknown configuration key")
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, name)
        else:
            kwargs[key] = _coerce(value, default, name)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def config_to_dict(config) -> dict:
    return dataclasses.asdict(config)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = str(path)
    if not os.path.exists(path):
        raise ConfigError(f"config: file '{path}' does not exist")
    try:
        if path.endswith(".toml"):
            with open(path, "rb") as f:
                data = tomllib.load(f)
        else:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"config: cannot parse '{path}' ({e})") from e
    config = config_from_dict(data)
    logger.info(f"Loaded configuration from {path}")
    return config


def _parse_override_value(text: str):
    lowered = text.strip().lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` (or ``train.lr.sh=...``) strings on top of ``config``."""
    data = config_to_dict(config)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"{item}: override must look like section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"{dotted}: unknown configuration key")
            node = node[part]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigError(f"{dotted}: unknown configuration key")
        node[parts[-1]] = _parse_override_value(raw)
    return config_from_dict(data)


def config_hash(config) -> str:
    payload = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()

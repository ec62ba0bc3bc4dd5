"""Experiment configuration: dataclasses, YAML round-trip, presets, overrides.

All tunables live in one nested :class:`Config` tree so that a run is fully
described by (preset, overrides) and can be hashed into the dataset
manifest.  Overrides use dotted paths, e.g. ``train.lr=1e-4`` or
``model.flow_guided=false``; values are parsed with YAML scalar rules.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class GridConfig:
    """Bird's-eye-view raster geometry.

    The grid is square-celled, axis-aligned and centred on the ego vehicle:
    cell (i, j) covers x in [(j - width/2) * resolution, ...), y likewise
    with row index i, so the ego sits between the four central cells.
    """

    height: int = 96          # number of rows (y axis)
    width: int = 96           # number of columns (x axis)
    resolution: float = 0.5   # meters per cell side


@dataclass
class WorldConfig:
    """Synthetic world generation parameters."""

    grid: GridConfig = field(default_factory=GridConfig)
    t_in: int = 2                 # past frames fed to the model
    t_out: int = 4                # future frames to predict
    dt: float = 0.5               # seconds between frames
    num_agents_min: int = 4
    num_agents_max: int = 10
    speed_min: float = 0.0        # m/s
    speed_max: float = 8.0
    yaw_rate_min: float = -0.5    # rad/s
    yaw_rate_max: float = 0.5
    length_min: float = 3.0       # agent box length, meters
    length_max: float = 6.0
    width_min: float = 1.6
    width_max: float = 2.4
    spawn_margin: float = 4.0     # keep spawn centers this far inside the grid, meters
    rigid_flow: bool = True       # False: translation-only backward flow


@dataclass
class DataConfig:
    """Dataset sizes and random seeds for generation."""

    num_train: int = 200
    num_eval: int = 50
    seed: int = 0


@dataclass
class ModelConfig:
    channels: int = 64            # BEV feature channels, also decoder hidden dim
    num_queries: int = 50         # learnable instance queries
    num_heads: int = 8            # attention heads
    num_points: int = 4           # sampling points per head in deformable attention
    num_predictor_layers: int = 4  # flow-guided attention layers per future step
    num_decoder_layers: int = 6   # instance decoder layers
    ffn_dim: int = 256            # feed-forward width in decoder layers
    num_classes: int = 1          # foreground classes (background is implicit)
    flow_guided: bool = True      # False: plain deformable attention in the predictor
    use_box_head: bool = True     # False: drop box regression branch and its costs


@dataclass
class LossConfig:
    weight_class: float = 2.0
    weight_box: float = 0.25
    weight_dice: float = 1.0
    weight_mask_l1: float = 1.0
    weight_flow: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0
    smooth_l1_beta: float = 1.0
    aux_supervision: bool = True   # supervise intermediate decoder layers too
    # Which frames contribute mask costs during matching:
    #   "all" = current + every future frame, "current" = current frame only,
    #   "none" = detection costs alone.
    mask_match_frames: str = "all"


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 2
    lr: float = 2e-4
    weight_decay: float = 0.01
    grad_clip: float = 35.0
    seed: int = 0
    eval_interval: int = 10       # epochs between held-out evaluations (0 = only at end)
    num_eval_scenarios: int = 0   # cap evaluation set during training (0 = all)


@dataclass
class InferenceConfig:
    mask_threshold: float = 0.5   # on the score-fused mask probability


@dataclass
class Config:
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)


# Named presets.  "desk" is the default documented configuration; "paper"
# mirrors the full-scale 200x200 setup; the small presets keep end-to-end
# training tractable on a single CPU core.
PRESETS: dict[str, dict[str, object]] = {
    "desk": {},
    "paper": {
        "world.grid.height": 200,
        "world.grid.width": 200,
        "world.grid.resolution": 0.5,
    },
    "cpu-small": {
        "world.grid.height": 48,
        "world.grid.width": 48,
        "model.channels": 32,
        "model.num_queries": 16,
        "model.ffn_dim": 128,
        "train.batch_size": 2,
    },
    "tiny": {
        "world.grid.height": 32,
        "world.grid.width": 32,
        "world.num_agents_min": 2,
        "world.num_agents_max": 5,
        "world.spawn_margin": 2.0,
        "model.channels": 16,
        "model.num_queries": 10,
        "model.num_heads": 4,
        "model.ffn_dim": 64,
        "model.num_predictor_layers": 2,
        "model.num_decoder_layers": 3,
        "data.num_train": 64,
        "data.num_eval": 16,
        "train.batch_size": 4,
    },
}


def _coerce(value: object, typ: object, path: str) -> object:
    """Coerce a YAML-decoded value into the annotated field type."""
    origin = typing.get_origin(typ)
    if dataclasses.is_dataclass(typ):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected mapping, got {type(value).__name__}")
        return _from_dict(typ, value, path)
    if origin in (tuple, list):
        args = typing.get_args(typ)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected sequence")
        item_t = args[0] if args else float
        seq = [_coerce(v, item_t, f"{path}[{k}]") for k, v in enumerate(value)]
        return tuple(seq) if origin is tuple else seq
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" as a string; accept it anyway.
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{path}: expected number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    return value


def _from_dict(cls: type, data: dict, path: str = "") -> object:
    known = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    for key in data:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {where}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(value, hints[name], sub)
    return cls(**kwargs)


def config_from_dict(data: dict) -> Config:
    return _from_dict(Config, data)  # type: ignore[return-value]


def config_to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path) -> Config:
    """Read a YAML config file into a :class:`Config`."""
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return config_from_dict(data)


def apply_override(cfg: Config, assignment: str) -> None:
    """Apply one ``dotted.path=value`` override in place."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key.path=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    set_by_path(cfg, dotted.strip(), value)


def set_by_path(cfg: Config, dotted: str, value: object) -> None:
    parts = dotted.split(".")
    obj: object = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key: {dotted}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key: {dotted}")
    hints = typing.get_type_hints(type(obj))
    setattr(obj, leaf, _coerce(value, hints[leaf], dotted))


def build_config(
    preset: str = "desk",
    config_file: str | Path | None = None,
    overrides: list[str] | None = None,
) -> Config:
    """Assemble a config from preset defaults, an optional file, and overrides.

    Precedence (lowest to highest): dataclass defaults, preset values,
    config file contents, command line overrides.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if config_file is not None:
        cfg = load_config(config_file)
    else:
        cfg = Config()
    if config_file is None:
        for dotted, value in PRESETS[preset].items():
            set_by_path(cfg, dotted, value)
    elif preset != "desk":
        raise ConfigError("pass either a preset or a config file, not both")
    for assignment in overrides or []:
        apply_override(cfg, assignment)
    validate_config(cfg)
    return cfg


def validate_config(cfg: Config) -> None:
    """Reject configurations that would fail later in confusing ways."""
    m = cfg.model
    if m.channels % m.num_heads != 0:
        raise ConfigError(
            f"model.channels ({m.channels}) must be divisible by model.num_heads ({m.num_heads})"
        )
    if cfg.world.grid.height < 2 or cfg.world.grid.width < 2:
        raise ConfigError("grid must be at least 2x2")
    if cfg.world.t_in < 1 or cfg.world.t_out < 1:
        raise ConfigError("world.t_in and world.t_out must be positive")
    if cfg.world.num_agents_min < 1 or cfg.world.num_agents_max < cfg.world.num_agents_min:
        raise ConfigError("invalid agent count range")
    if cfg.loss.mask_match_frames not in ("all", "current", "none"):
        raise ConfigError("loss.mask_match_frames must be one of: all, current, none")
    if not 0.0 < cfg.infer.mask_threshold < 1.0:
        raise ConfigError("infer.mask_threshold must be in (0, 1)")
    if cfg.model.num_queries < 1:
        raise ConfigError("model.num_queries must be positive")


def config_hash(cfg: Config) -> str:
    """Stable short hash of the full config (sorted-key YAML, sha256)."""
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)

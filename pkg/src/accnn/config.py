"""Run configuration and the flat ``section.key=value`` file format."""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .global_attention import GlobalConfig
from .local_context import LocalContextConfig
from .model import VARIANTS, ModelConfig
from .synth import SceneSpec


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    iters: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_factor: float = 0.1
    decay_step: int = 1200
    images_per_batch: int = 2
    rois_per_batch: int = 128
    fg_fraction: float = 0.25
    bg_lo: float = 0.0
    bg_hi: float = 0.5
    flip: bool = True
    normalize_targets: bool = True
    warmup_proposals: int = 100


@dataclass
class DataConfig:
    corpus: str = ""  # directory written by gen-data; empty = generate in memory
    seed: int = 1234
    n_train: int = 500
    n_test: int = 100
    workers: int = 1  # parallel scene generation; output does not depend on it


@dataclass
class EvalConfig:
    ap_mode: str = "all-points"
    iou_thr: float = 0.5
    score_thr: float = 0.05
    nms_thr: float = 0.3


@dataclass
class AttendConfig:
    size: int = 64
    max_images: int = 0  # 0 = all


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    attend: AttendConfig = field(default_factory=AttendConfig)
    seed: int = 0
    out: str = "runs/default"

    @property
    def variant(self) -> str:
        return self.model.variant


# section name -> attribute path from RunConfig
SECTIONS = {
    "backbone": ("model", "backbone"),
    "local": ("model", "local"),
    "global": ("model", "global_"),
    "model": ("model",),
    "scene": ("scene",),
    "train": ("train",),
    "data": ("data",),
    "eval": ("eval",),
    "attend": ("attend",),
    "run": (),
}

# short CLI flags -> flat keys
SHORT_FLAGS = {
    "seed": "run.seed",
    "out": "run.out",
    "variant": "model.variant",
    "scales": "local.scales",
    "iters": "train.iters",
    "lr": "train.lr",
    "k_grid": "global.K",
    "t_steps": "global.T",
    "ap_mode": "eval.ap_mode",
}


def _section_obj(cfg: RunConfig, section: str):
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    obj = cfg
    for attr in SECTIONS[section]:
        obj = getattr(obj, attr)
    return obj


def _parse_value(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if text.lower() == "none":
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(value, current, key: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = tuple(_parse_value(v) for v in value.split(",") if v.strip())
        seq = value if isinstance(value, (tuple, list)) else (value,)
        kind = type(current[0]) if current else float
        try:
            return tuple(kind(v) for v in seq)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: bad list value {value!r}") from e
    if current is None or value is None:
        return value
    if isinstance(current, (int, float, str)):
        try:
            return type(current)(value) if not (isinstance(current, int) and isinstance(value, float)) else _int_strict(value, key)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: cannot convert {value!r} to {type(current).__name__}") from e
    return value


def _int_strict(v: float, key: str) -> int:
    if float(v).is_integer():
        return int(v)
    raise ConfigError(f"{key}: expected an integer, got {v!r}")


def set_key(cfg: RunConfig, key: str, raw: str) -> None:
    if "." not in key:
        raise ConfigError(f"config key {key!r} needs a section prefix")
    section, name = key.split(".", 1)
    obj = _section_obj(cfg, section)
    if not hasattr(obj, name) or name.startswith("_"):
        raise ConfigError(f"unknown config key {key!r}")
    value = _coerce(_parse_value(raw), getattr(obj, name), key)
    setattr(obj, name, value)


def flat_items(cfg: RunConfig) -> dict[str, object]:
    out: dict[str, object] = {}
    for section in SECTIONS:
        obj = _section_obj(cfg, section)
        for f in dataclasses.fields(obj):
            if dataclasses.is_dataclass(getattr(obj, f.name)):
                continue
            out[f"{section}.{f.name}"] = getattr(obj, f.name)
    return out


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return "none" if v is None else str(v)


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in flat_items(cfg).items())


def loads(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        set_key(cfg, k.strip(), v)
    return validate(cfg)


def load_file(path, cfg: RunConfig | None = None) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8"), cfg)


def validate(cfg: RunConfig) -> RunConfig:
    """Re-run dataclass checks after mutation."""
    try:
        m = cfg.model
        m.backbone = BackboneConfig(**dataclasses.asdict(m.backbone))
        m.local = LocalContextConfig(**dataclasses.asdict(m.local))
        m.global_ = GlobalConfig(**dataclasses.asdict(m.global_))
        if m.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        cfg.scene = SceneSpec(**dataclasses.asdict(cfg.scene))
        if cfg.scene.n_classes != m.n_classes:
            m.n_classes = cfg.scene.n_classes
        if cfg.eval.ap_mode not in ("all-points", "11-point"):
            raise ValueError(f"unknown ap mode {cfg.eval.ap_mode!r}")
        if cfg.train.images_per_batch < 1 or cfg.train.rois_per_batch % cfg.train.images_per_batch:
            raise ValueError("rois_per_batch must split evenly across images")
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in flat_items(cfg).items()}

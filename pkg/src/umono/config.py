"""Flat ``section.key = value`` run configuration.

Defaults follow the published training setup where it is stated (stage
depths/widths, loss weights, learning rate, weight decay, batch size 8).
``preset = desk`` switches to the small CPU-sized network and batch 4;
explicit keys in the same file still override the preset.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .objective import LossConfig

ENCODER_ABLATION_NAMES = {"full": "full", "w_cnn": "cnn_only",
                          "w_transformer": "transformer_only", "wo_lgff": "fuse_add"}
GUIDANCE_NAMES = {"udia": "udia", "none": "none", "hef": "hef_only", "mtm": "mtm_only"}


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0


@dataclass
class ScheduleConfig:
    warmup: float = 0.3
    start_div: float = 25.0
    floor_div: float = 100.0
    anneal: str = "cos"
    poly_power: float = 0.9


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 8
    steps: int = 0  # 0: epochs * batches-per-epoch
    seed: int = 0
    ckpt_every: int = 0  # extra checkpoint every N steps (0: epoch ends only)
    precision: int = 32


@dataclass
class DataConfig:
    train_manifest: str = ""
    eval_manifest: str = ""
    patch_radius: int = 7


@dataclass
class EvalConfig:
    convention: str = "gt"


@dataclass
class OutConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    preset: str = "full"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: OutConfig = field(default_factory=OutConfig)

    @classmethod
    def desk(cls):
        cfg = cls(preset="desk")
        cfg.encoder.depths = [1, 1, 1, 1]
        cfg.encoder.channels = [16, 32, 64, 128]
        cfg.train.batch_size = 4
        return cfg

    def validate(self):
        try:
            self.encoder.validate()
            self.decoder.validate()
            self.loss.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.train.precision not in (32, 64):
            raise ConfigError("train.precision must be 32 or 64")
        if self.schedule.anneal not in ("cos", "poly"):
            raise ConfigError("schedule.anneal must be 'cos' or 'poly'")
        if not 0 <= self.schedule.warmup < 1:
            raise ConfigError("schedule.warmup must lie in [0, 1)")
        if self.eval.convention not in ("gt", "pred"):
            raise ConfigError("eval.convention must be 'gt' or 'pred'")
        return self

    def to_text(self) -> str:
        lines = [f"preset={self.preset}"]
        for key, value in _flat_items(self):
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


# keys whose external spelling differs from the attribute name
_RENAMES = {("loss", "lam"): "lambda"}
_VALUE_MAPS = {("encoder", "ablation"): ENCODER_ABLATION_NAMES,
               ("decoder", "guidance"): GUIDANCE_NAMES}


def _sections(cfg):
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if dataclasses.is_dataclass(val):
            yield f.name, val


def _flat_items(cfg):
    for sec, obj in _sections(cfg):
        for f in dataclasses.fields(obj):
            key = _RENAMES.get((sec, f.name), f.name)
            val = getattr(obj, f.name)
            vmap = _VALUE_MAPS.get((sec, f.name))
            if vmap:
                val = {v: k for k, v in vmap.items()}[val]
            elif isinstance(val, list):
                val = ",".join(str(v) for v in val)
            yield f"{sec}.{key}", val


def _parse_value(raw, default, key):
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, list):
            return [int(v) for v in raw.split(",") if v.strip()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def set_key(cfg: RunConfig, key: str, raw: str):
    sec, _, name = key.partition(".")
    sections = dict(_sections(cfg))
    if sec not in sections or not name:
        raise ConfigError(f"unknown config key {key!r}")
    obj = sections[sec]
    attr = {v: k for (s, k), v in _RENAMES.items() if s == sec}.get(name, name)
    fields = {f.name for f in dataclasses.fields(obj)}
    if attr not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    vmap = _VALUE_MAPS.get((sec, attr))
    if vmap is not None:
        if raw not in vmap:
            raise ConfigError(f"{key}: expected one of {sorted(vmap)}, got {raw!r}")
        value = vmap[raw]
    else:
        value = _parse_value(raw, getattr(obj, attr), key)
    setattr(obj, attr, value)


def parse_config(text: str, overrides=None) -> RunConfig:
    """Parse config text; unknown keys and malformed lines are fatal."""
    pairs = []
    preset = "full"
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "preset":
            preset = value
        else:
            pairs.append((key, value))
    if preset not in ("full", "desk"):
        raise ConfigError(f"preset must be 'full' or 'desk', got {preset!r}")
    cfg = RunConfig.desk() if preset == "desk" else RunConfig()
    for key, value in pairs + list((overrides or {}).items()):
        set_key(cfg, key, str(value))
    return cfg.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)

"""Run configuration: dataclasses plus a flat ``key=value`` file format.

Every key lives in exactly one of the dataclasses below, so a single config
file can carry architecture, schedule, training and sampling settings.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

CATEGORIES = ("upper", "lower", "full_body")


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 48
    pixel_mode: bool = False
    latent_channels: int = 4
    codec_widths: tuple[int, ...] = (32, 64, 128)
    unet_widths: tuple[int, ...] = (64, 128)
    heads: int = 4
    attn_dim: int = 128
    text_tokens: int = 4
    image_tokens: int = 4
    crop_size: int = 32
    extractor_widths: tuple[int, ...] = (32, 64, 128)
    norm_groups: int = 32
    per_step_reference: bool = False
    use_garmnet: bool = True

    def __post_init__(self):
        if self.height < 16 or self.width < 16 or self.height % 8 or self.width % 8:
            raise ConfigError(
                f"height/width must be >= 16 and divisible by 8, got {self.height}x{self.width}")
        if len(self.codec_widths) != 3:
            raise ConfigError("codec_widths must have exactly 3 entries (8x downsampling)")
        if not self.unet_widths:
            raise ConfigError("unet_widths must be non-empty")
        for w in self.unet_widths:
            if w % self.heads:
                raise ConfigError(f"unet width {w} not divisible by heads={self.heads}")
        if min(self.text_tokens, self.image_tokens, self.attn_dim, self.crop_size) < 1:
            raise ConfigError("token counts, attn_dim and crop_size must be positive")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        if self.pixel_mode:
            return (3, self.height, self.width)
        return (self.latent_channels, self.height // 8, self.width // 8)


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2
    schedule_curve: str = "scaled_linear"


@dataclass
class SampleConfig:
    ddim_steps: int = 25
    guidance_scale: float = 1.5
    seed: int = 0


@dataclass
class TrainConfig:
    stage: str = "coarse"
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    steps: int = 1000
    drop_prob: float = 0.1
    grad_clip: float = 1.0
    hqft_lr_factor: float = 0.5
    hqft_step_factor: float = 0.25
    hqft_steps: int = -1   # < 0: hqft_step_factor x coarse steps
    codec_batch_size: int = 16
    codec_learning_rate: float = 1e-3
    train_seed: int = 0
    data: str = ""
    manifest: str = ""
    codec_ckpt: str = ""
    init_ckpt: str = ""
    out: str = ""
    log_every: int = 1

    def validate(self):
        if self.stage not in ("codec", "coarse", "hqft"):
            raise ConfigError(f"stage must be codec|coarse|hqft, got {self.stage!r}")
        if self.learning_rate <= 0 or self.codec_learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.drop_prob <= 1:
            raise ConfigError(f"drop_prob must be in [0, 1], got {self.drop_prob}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def seed(self) -> int:
        return self.sample.seed

    def set(self, key: str, raw: Any):
        if key == "seed":
            self.sample.seed = int(raw)
            self.train.train_seed = int(raw)
            return
        for section in (self.model, self.schedule, self.sample, self.train):
            for f in dataclasses.fields(section):
                if f.name == key:
                    value = _coerce(raw, getattr(section, key), key)
                    setattr(section, key, value)
                    return
        raise ConfigError(f"unknown config key {key!r}")

    def items(self):
        yield "seed", self.sample.seed
        for section in (self.model, self.schedule, self.sample, self.train):
            for f in dataclasses.fields(section):
                if f.name == "seed":
                    continue
                yield f.name, getattr(section, f.name)


def _coerce(raw: Any, current: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_kv_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        path = Path(path)
        if not path.is_file():
            from .errors import IoError
            raise IoError(f"config file not found: {path}")
        for key, value in parse_kv_lines(path.read_text(), str(path)).items():
            cfg.set(key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg.set(key, value)
    cfg.model.__post_init__()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in cfg.items())

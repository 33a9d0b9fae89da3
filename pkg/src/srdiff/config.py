"""Dataclass configs and the JSON run-config loader."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class PredictorConfig:
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 2, 4)
    res_blocks_per_step: int = 2
    cond_channels: int = 32
    time_embed_dim: int | None = None  # defaults to base_channels

    def __post_init__(self):
        self.channel_mults = tuple(int(m) for m in self.channel_mults)
        if self.time_embed_dim is None:
            self.time_embed_dim = self.base_channels
        if len(self.channel_mults) != 4:
            raise ConfigError(f"the predictor has exactly 4 contracting steps, got multipliers {self.channel_mults}")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        _positive(self, "base_channels", "res_blocks_per_step", "cond_channels", "time_embed_dim")


@dataclass
class EncoderConfig:
    num_rrdb_blocks: int = 8
    feature_channels: int = 32
    growth_channels: int = 16
    scale: int = 8

    def __post_init__(self):
        _positive(self, "num_rrdb_blocks", "feature_channels", "growth_channels", "scale")
        if self.scale & (self.scale - 1):
            raise ConfigError(f"scale must be a power of two, got {self.scale}")


@dataclass
class TrainConfig:
    T: int = 100
    schedule: str = "cosine"
    batch_size: int = 16
    lr: float = 2e-4
    lr_halve_every: int = 100_000
    pretrain_steps: int = 100_000
    pretrain_batch_size: int = 16
    total_steps: int = 300_000
    residual_prediction: bool = True
    freeze_encoder: bool = True
    grad_clip: float | None = 1.0
    checkpoint_every: int = 10_000
    log_every: int = 1
    seed: int = 0

    def __post_init__(self):
        _positive(self, "T", "batch_size", "lr", "lr_halve_every", "pretrain_batch_size", "checkpoint_every", "log_every")
        if self.pretrain_steps < 0 or self.total_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.schedule not in ("cosine", "linear"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")

    def lr_at(self, step: int) -> float:
        """Learning rate at 0-based ``step``: halved every ``lr_halve_every`` steps."""
        return self.lr * 0.5 ** (step // self.lr_halve_every)


def face_config() -> tuple[TrainConfig, EncoderConfig, PredictorConfig]:
    """8x face setting: 8 RRDB blocks, c = 64, T = 100."""
    return TrainConfig(), EncoderConfig(num_rrdb_blocks=8, scale=8), PredictorConfig(base_channels=64)


def general_config() -> tuple[TrainConfig, EncoderConfig, PredictorConfig]:
    """4x general setting: 15 RRDB blocks, 400k steps."""
    return TrainConfig(total_steps=400_000), EncoderConfig(num_rrdb_blocks=15, scale=4), PredictorConfig(base_channels=64)


def _positive(obj, *names):
    for n in names:
        if getattr(obj, n) <= 0:
            raise ConfigError(f"{type(obj).__name__}.{n} must be positive, got {getattr(obj, n)}")


def _check_value(cls, name: str, value: Any) -> Any:
    ftype = {f.name: f.type for f in dataclasses.fields(cls)}[name]
    base, _, opt = ftype.partition(" | ")
    if value is None:
        if opt == "None":
            return None
        raise ConfigError(f"{cls.__name__}.{name} may not be null")
    is_int = isinstance(value, int) and not isinstance(value, bool)
    if base == "bool":
        ok = isinstance(value, bool)
    elif base == "int":
        ok = is_int
    elif base == "float":
        ok = is_int or isinstance(value, float)
    elif base == "str":
        ok = isinstance(value, str)
    else:  # tuple[int, ...]
        ok = isinstance(value, (list, tuple)) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    if not ok:
        raise ConfigError(f"{cls.__name__}.{name}: expected {ftype}, got {value!r}")
    return value


def from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {unknown}")
    try:
        return cls(**{k: _check_value(cls, k, v) for k, v in data.items()})
    except TypeError as e:
        raise ConfigError(str(e)) from e


@dataclass
class DataConfig:
    hr_dir: str = ""
    patch: int = 160
    patches_per_image: int = 1
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.patch <= 0 or self.patch % 16:
            raise ConfigError(f"patch must be a positive multiple of 16, got {self.patch}")
        _positive(self, "patches_per_image")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(data) - {"train", "encoder", "predictor", "data"})
        if unknown:
            raise ConfigError(f"RunConfig: unknown keys {unknown}")
        cfg = cls(
            train=from_dict(TrainConfig, data.get("train", {})),
            encoder=from_dict(EncoderConfig, data.get("encoder", {})),
            predictor=from_dict(PredictorConfig, data.get("predictor", {})),
            data=from_dict(DataConfig, data.get("data", {})),
        )
        if cfg.data.patch % cfg.encoder.scale:
            raise ConfigError(f"patch {cfg.data.patch} is not divisible by scale {cfg.encoder.scale}")
        if cfg.encoder.feature_channels != cfg.predictor.cond_channels:
            raise ConfigError("predictor.cond_channels must equal encoder.feature_channels")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictor"]["channel_mults"] = list(d["predictor"]["channel_mults"])
        return d

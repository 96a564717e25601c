"""Run configuration: every module default as one strict JSON document."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .denoiser import DenoiserConfig
from .errors import ParameterError
from .trainer import TrainerConfig


class ConfigError(ParameterError):
    """Malformed or unknown configuration content."""


@dataclass
class DataConfig:
    n_per_class: int = 600
    frames: int = 8
    size: int = 32
    classes: list | None = None  # list of ToyClassSpec dicts; None = bundled three classes


@dataclass
class CodecConfig:
    patch: int = 4
    channels: int = 4


@dataclass
class ScheduleConfig:
    T: int = 250
    beta_start: float = 4e-4
    beta_end: float = 0.08


@dataclass
class ExtractorSettings:
    hidden: int = 128
    features: int = 32
    epochs: int = 8
    lr: float = 1e-3
    val_fraction: float = 0.2


@dataclass
class MetricsConfig:
    is_splits: int = 4
    eval_clips_per_class: int = 40
    n_steps: int = 50
    batch_size: int = 64


@dataclass
class SampleConfig:
    n_steps: int = 50
    count: int = 4
    label: int = 0
    use_ema: bool = True
    batch_size: int = 64


@dataclass
class BenchConfig:
    steps: list = field(default_factory=lambda: [250, 100, 50, 10, 5])
    clips_per_class: int = 20


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    extractor: ExtractorSettings = field(default_factory=ExtractorSettings)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name != "model" else None
        if dataclasses.is_dataclass(default) or name == "model":
            sub = DenoiserConfig if name == "model" else type(default)
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)

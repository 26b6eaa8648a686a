"""Run configuration: JSON with a versioned schema and dotted-path overrides."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import DatasetSpec
from .matching import LossWeights

SCHEMA_VERSION = 1
MODES = ("inductive", "transductive")


class ConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 20
    stage3_epochs: int = 10
    batch_size: int = 8
    base_lr: float = 0.1
    stage2_lr_multiplier: float = 0.1
    stage3_lr_multiplier: float = 1.0
    pseudo_per_step: int = 16
    fidelity_samples: int = 200
    lr_power: float = 0.9  # polynomial decay exponent within each stage; 0 keeps the lr constant

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("training.batch_size must be >= 1")
        if min(self.stage1_epochs, self.stage2_epochs, self.stage3_epochs) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.base_lr <= 0:
            raise ValueError("training.base_lr must be positive")
        if self.lr_power < 0:
            raise ValueError("training.lr_power must be >= 0")
        if self.pseudo_per_step < 0:
            raise ValueError("training.pseudo_per_step must be >= 0")


@dataclass
class ModelConfig:
    projector_hidden: int | None = None
    cvae_hidden: int | None = None
    condition_gain: float | None = 6.0  # None -> sqrt(c_semantic)


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    mode: str = "transductive"
    output_dir: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    losses: LossWeights = field(default_factory=LossWeights)
    training: StageConfig = field(default_factory=StageConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"schema_version must be {SCHEMA_VERSION}, got {self.schema_version}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dataset"] = self.dataset.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["seed"] = seed
        d["dataset"]["seed"] = seed
        return config_from_dict(d)


def _check_type(path: str, value, hint):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        errors = []
        for arm in typing.get_args(hint):
            try:
                return _check_type(path, value, arm)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(f"{path}: value {value!r} matches none of {hint}")
    if hint is type(None):
        if value is not None:
            raise ConfigError(f"{path}: expected null, got {value!r}")
        return None
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        args = typing.get_args(hint)
        item = args[0] if args else typing.Any
        return [_check_type(f"{path}[{i}]", v, item) for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown field '{(path + '.') if path else ''}{unknown[0]}'")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _check_type(f"{path}.{name}" if path else name, value, hints[name])
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``a.b.c=value`` assignments (value parsed as JSON when possible)."""
    d = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown field '{key}'")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown field '{key}'")
        node[parts[-1]] = _parse_value(text)
    return config_from_dict(d)

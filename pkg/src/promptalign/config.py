"""Experiment configuration: YAML in, validated dataclasses out.

Precedence, lowest to highest: built-in defaults, the config file, command
line flags.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .alignment import AdvLossWeights
from .detector import ModelConfig, edge_config
from .losses import LossWeights
from .pipeline import Flags, TrainConfig
from .synthdata import BenchmarkConfig, DomainSpec, default_target_specs, medium_shift_spec

TARGET_PRESETS = ("default", "medium", "noshift")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}" if field_path else message)
        self.field = field_path


@dataclass
class DataConfig:
    image_size: int = 64
    max_objects: int = 8
    n_source: int = 400
    n_target: int = 200
    adapt_fraction: float = 0.5
    source: DomainSpec = field(default_factory=DomainSpec)
    # a preset name or an explicit list of domain specs
    targets: str | list[DomainSpec] = "default"

    def target_specs(self) -> list[DomainSpec]:
        if isinstance(self.targets, str):
            if self.targets == "default":
                return default_target_specs()
            if self.targets == "medium":
                return [medium_shift_spec()]
            # in-distribution control: same rendering parameters, fresh scenes
            return [dataclasses.replace(self.source, name="noshift", seed=self.source.seed + 3000)]
        return list(self.targets)

    def benchmark(self) -> BenchmarkConfig:
        return BenchmarkConfig(
            image_size=self.image_size,
            max_objects=self.max_objects,
            n_source=self.n_source,
            n_target=self.n_target,
            adapt_fraction=self.adapt_fraction,
            source=self.source,
            targets=self.target_specs(),
        )


@dataclass
class ExperimentConfig:
    name: str
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if self.model.image_size != self.data.image_size:
            raise ConfigError("model.image_size",
                              f"{self.model.image_size} differs from data.image_size {self.data.image_size}")

    def edge_model(self) -> ModelConfig:
        return edge_config(self.model)

    def to_dict(self) -> dict:
        return _plain(self)


REQUIRED = ("name",)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _convert(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for option in args:
            if option is type(None):
                continue
            try:
                return _convert(value, option, path)
            except ConfigError as err:
                errors.append(str(err))
        raise ConfigError(path, f"value {value!r} matches none of the allowed types")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if origin in (list, tuple) or tp in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if not args:
            items = [tuple(v) if isinstance(v, list) else v for v in value]
        elif origin is tuple and len(args) == 2 and args[1] is Ellipsis:
            items = [_convert(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
        elif origin is tuple:
            if len(value) != len(args):
                raise ConfigError(path, f"expected {len(args)} entries, got {len(value)}")
            items = [_convert(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args))]
        else:
            items = [_convert(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
        return list(items) if origin is list else tuple(items)
    raise ConfigError(path, f"unsupported field type {tp}")


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        where = f"{prefix}.{unknown[0]}" if prefix else unknown[0]
        raise ConfigError(where, f"unknown key (allowed: {', '.join(sorted(known))})")
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        kwargs[key] = _convert(value, hints[key], path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(prefix or cls.__name__, str(err)) from err


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "config file must hold a mapping at the top level")
    for key in REQUIRED:
        if key not in data:
            raise ConfigError(key, "required field is missing")
    if isinstance(data.get("data", {}).get("targets"), str) and data["data"]["targets"] not in TARGET_PRESETS:
        raise ConfigError("data.targets", f"unknown preset (choose from {', '.join(TARGET_PRESETS)})")
    return _build(ExperimentConfig, data)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError("", f"cannot read config file {path}: {err.strerror}") from err
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError("", f"{path} is not valid YAML: {err}") from err
    return config_from_dict(data or {})


def default_config(name: str = "default") -> ExperimentConfig:
    return ExperimentConfig(name=name)


def apply_overrides(
    cfg: ExperimentConfig,
    seeds: list[int] | None = None,
    output_dir: str | None = None,
    dqfa: bool | None = None,
    tiafa: bool | None = None,
    vpg: bool | None = None,
    tau: float | None = None,
    epochs: int | None = None,
) -> ExperimentConfig:
    """Command-line values replace file values; ``None`` means "not given"."""
    train = cfg.train
    flags = train.flags
    flags = Flags(
        dqfa=flags.dqfa if dqfa is None else dqfa,
        tiafa=flags.tiafa if tiafa is None else tiafa,
        vpg=flags.vpg if vpg is None else vpg,
    )
    adv = train.adv
    if tau is not None:
        try:
            adv = dataclasses.replace(adv, tau=tau)
        except ValueError as err:
            raise ConfigError("tau", str(err)) from err
    if epochs is not None and epochs < 0:
        raise ConfigError("epochs", "must be non-negative")
    train = dataclasses.replace(
        train,
        flags=flags,
        adv=adv,
        adapt_epochs=train.adapt_epochs if epochs is None else epochs,
    )
    return dataclasses.replace(
        cfg,
        seeds=list(seeds) if seeds else cfg.seeds,
        output_dir=output_dir if output_dir is not None else cfg.output_dir,
        train=train,
    )


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


__all__ = [
    "AdvLossWeights",
    "ConfigError",
    "DataConfig",
    "ExperimentConfig",
    "LossWeights",
    "apply_overrides",
    "config_from_dict",
    "default_config",
    "dump_config",
    "load_config",
]

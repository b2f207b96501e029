"""Run configuration: nested dataclasses that round-trip through YAML."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .attention import AttentionConfig, ScaleSpec, TokenizerConfig
from .cascade import CascadeConfig
from .toybench import SplitSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: float = 1.0
    warmup_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (20,)
    decay_factor: float = 0.1
    clip_norm: float = 10.0


@dataclass(frozen=True)
class LossConfig:
    lambda_oim: float = 0.5
    lambda_id: float = 0.5
    oim_tau: float = 1.0 / 30
    oim_gamma: float = 0.5
    cq_capacity: int = 64


def toy_model() -> CascadeConfig:
    """Desk-scale model: narrower maps and fewer proposals than the full-size defaults.

    The proposal mix is calibrated for the toy benchmark: mostly positives, with
    jitter drawn from [0.05, 0.3] so every stage threshold sees tight and loose
    boxes, and a low score cut so gallery scenes keep their small people.
    """
    return CascadeConfig(
        proposals_per_image=32,
        embed_dim=64,
        pool_size=7,
        channels=64,
        pos_fraction=0.75,
        min_jitter=0.05,
        score_threshold=0.2,
    )


@dataclass(frozen=True)
class RunConfig:
    data: SplitSpec = field(default_factory=SplitSpec)
    model: CascadeConfig = field(default_factory=toy_model)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 30
    batch_size: int = 2
    seed: int = 0
    eval_seed: int = 0
    gallery_sizes: tuple[int, ...] = (2, 4, 8, 16)
    precision: int = 32

    def __post_init__(self) -> None:
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def to_dict(obj: Any) -> Any:
    """Plain Python containers (lists, dicts, scalars) suitable for YAML/JSON."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(x) for x in obj]
    return obj


def _build(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None and len(args) < len(typing.get_args(tp)):
            return None
        return _build(args[0], value, where)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, (list, tuple)):
            # positional shorthand, e.g. a scale written as [kernel, stride, padding]
            names = [f.name for f in dataclasses.fields(tp)]
            if len(value) > len(names):
                raise ConfigError(f"{where}: at most {len(names)} values")
            value = dict(zip(names, value))
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return from_dict(tp, value, where)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_build(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_build(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        return str(value)
    return value


def from_dict(cls: type, data: dict, where: str = "config") -> Any:
    """Build ``cls`` from a (possibly partial) mapping; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: _build(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def merge(base: RunConfig, overrides: dict) -> RunConfig:
    """Deep-merge a partial mapping over ``base``."""

    def deep(a: dict, b: dict) -> dict:
        out = dict(a)
        for k, v in b.items():
            out[k] = deep(a[k], v) if isinstance(v, dict) and isinstance(a.get(k), dict) else v
        return out

    return from_dict(RunConfig, deep(to_dict(base), overrides))


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return merge(RunConfig(), data)


def load(path: str | Path) -> RunConfig:
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))


__all__ = [
    "AttentionConfig",
    "CascadeConfig",
    "ConfigError",
    "LossConfig",
    "OptimConfig",
    "RunConfig",
    "ScaleSpec",
    "SplitSpec",
    "TokenizerConfig",
    "dumps",
    "from_dict",
    "load",
    "loads",
    "merge",
    "save",
    "to_dict",
    "toy_model",
]

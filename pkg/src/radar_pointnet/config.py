"""Run configuration: one JSON document covering generation, training and evaluation.

Every section maps onto a dataclass used by the pipeline; loading is strict and
rejects unknown keys with their dotted path.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from radar_pointnet.loss import LossWeights
from radar_pointnet.model import ModelConfig
from radar_pointnet.patches import (
    MIN_CAR_POINTS,
    MIN_CLUTTER_POINTS,
    PATCH_SIZE,
    SPLIT_RATIOS,
    TEST_KINDS,
    AugmentConfig,
)
from radar_pointnet.sim import LABEL_GROWTH, MANEUVER_KINDS, ManeuverSpec, ReflectionModelParams, SensorModel
from radar_pointnet.training import TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass(frozen=True)
class ManeuverGroup:
    """``instances`` recordings of one maneuver kind."""
    kind: str
    instances: int = 1
    duration: float = 4.0
    cycle_period: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in MANEUVER_KINDS:
            raise ConfigError(f"unknown maneuver kind {self.kind!r}")
        if self.instances < 1 or self.duration <= 0 or self.cycle_period <= 0:
            raise ConfigError(f"maneuver group {self.kind!r} needs positive counts and times")

    def specs(self, seed: int) -> List[ManeuverSpec]:
        return [ManeuverSpec(self.kind, self.duration, self.cycle_period, seed, i)
                for i in range(self.instances)]


def default_corpus() -> Tuple[ManeuverGroup, ...]:
    # Roughly 5000 valid patches with split shares near 62/20/19. Many short
    # instances with two well-separated cycles each give the box regression
    # more distinct car poses than a few long recordings would.
    train_side = ("circle", "figure_eight", "approach_head_on", "lead_in_front", "random_drive")
    groups = [ManeuverGroup(k, 8, duration=8.0, cycle_period=4.0) for k in train_side]
    groups.append(ManeuverGroup("static_clutter_only", 2, duration=8.0, cycle_period=4.0))
    groups += [ManeuverGroup(k, 2, duration=8.0, cycle_period=4.0) for k in TEST_KINDS]
    return tuple(groups)


@dataclass(frozen=True)
class PatchConfig:
    patch_size: float = PATCH_SIZE
    min_car_points: int = MIN_CAR_POINTS
    min_clutter_points: int = MIN_CLUTTER_POINTS
    label_growth: float = LABEL_GROWTH


@dataclass(frozen=True)
class SplitConfig:
    test_kinds: Tuple[str, ...] = TEST_KINDS
    ratios: Tuple[float, float, float] = SPLIT_RATIOS


@dataclass(frozen=True)
class PathsConfig:
    dataset: Optional[str] = None
    out: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    maneuvers: Tuple[ManeuverGroup, ...] = field(default_factory=default_corpus)
    reflection: ReflectionModelParams = field(default_factory=ReflectionModelParams)
    sensor: SensorModel = field(default_factory=SensorModel)
    patch: PatchConfig = field(default_factory=PatchConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed))

    def maneuver_specs(self) -> List[ManeuverSpec]:
        return [s for g in self.maneuvers for s in g.specs(self.seed)]


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin in (tuple, list) or tp in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if not args:
            items = list(value)
        elif origin is tuple and len(args) == 2 and args[1] is Ellipsis:
            items = [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
        elif origin is tuple:
            if len(args) != len(value):
                raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
            items = [_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value))]
        else:
            items = [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if (origin is tuple or tp is tuple) else items
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key: {where}{unknown[0]}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path: Union[str, Path, None]) -> RunConfig:
    """Read a JSON run config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return config_from_dict(data)

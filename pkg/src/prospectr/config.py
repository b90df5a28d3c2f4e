"""JSON run configuration: nested dataclasses with strict key checking."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .clf import ClassifierConfig
from .mae import MaeConfig
from .nn import ConfigError
from .preprocess import PreprocessConfig
from .pu import SamplingConfig
from .synth import WorldSpec

SCHEMA_VERSION = 1
METHODS = ("ours", "vit", "ann")


@dataclass
class RasterConfig:
    window: int = 16

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be positive")


@dataclass
class XaiConfig:
    steps: int = 64
    stride: int = 4
    chunk: int = 256
    dropout_seed: int | None = None

    def __post_init__(self):
        if self.steps < 8 or self.stride < 1:
            raise ConfigError("IG needs steps >= 8 and stride >= 1")


@dataclass
class EvalConfig:
    threshold: float = 0.5
    methods: tuple[str, ...] = METHODS
    drop_fraction: float = 0.5
    filter_ranges: tuple[float, ...] = (0.0, 0.10, 0.75)
    map_stride: int = 1
    alpha: float = 0.05

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.filter_ranges = tuple(float(f) for f in self.filter_ranges)
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must be in (0, 1)")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ConfigError("drop_fraction must be in [0, 1)")


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "run"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    raster: RasterConfig = field(default_factory=RasterConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    mae: MaeConfig = field(default_factory=MaeConfig)
    pu: SamplingConfig = field(default_factory=SamplingConfig)
    clf: ClassifierConfig = field(default_factory=ClassifierConfig)
    xai: XaiConfig = field(default_factory=XaiConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: WorldSpec = field(default_factory=WorldSpec)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.mae.encoder.window != self.raster.window:
            raise ConfigError("mae.encoder.window must equal raster.window")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(f'{where}{k}' for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = _build(hint, value, f"{where}{key}.")
        elif isinstance(value, list) and _is_tuple(hint):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where.rstrip('.') or 'config'}: {exc}") from exc


def _is_tuple(hint) -> bool:
    if typing.get_origin(hint) is tuple:
        return True
    if typing.get_origin(hint) in (typing.Union, types.UnionType):
        return any(_is_tuple(h) for h in typing.get_args(hint))
    return False


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)

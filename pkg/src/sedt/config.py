"""Run configuration: one versioned JSON document with validated sections.

Every key has a default; unknown keys anywhere in the tree are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .assignment import MatchWeights
from .corpus import SpecError, SynthSpec, default_spec
from .data import FeatureParams
from .finetuning import FinetuneConfig, InferenceConfig
from .losses import LossWeights
from .network import ConfigError, ModelConfig
from .pretraining import BackboneConfig, PretrainConfig

CONFIG_VERSION = 1


@dataclass
class DataConfig:
    n_strong: int = 200
    n_weak: int = 200
    n_unlabeled: int = 2000
    n_val: int = 200
    n_mels: int = 64
    hop_sec: float = 0.02
    win_sec: float = 0.04
    synth: dict = field(default_factory=lambda: default_spec().to_json())

    @property
    def feature_params(self) -> FeatureParams:
        return FeatureParams(self.n_mels, self.hop_sec, self.win_sec)

    def synth_spec(self) -> SynthSpec:
        try:
            spec = SynthSpec.from_json(self.synth)
            spec.validate()
        except (TypeError, KeyError, SpecError) as exc:
            raise ConfigError(f"data.synth: {exc}") from exc
        return spec


@dataclass
class PretrainSection:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    patch: PretrainConfig = field(default_factory=PretrainConfig)


@dataclass
class EvalConfig:
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    collar_sec: float = 0.2
    segment_sec: float = 1.0
    offset_fraction: float = 0.0


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=lambda: ModelConfig().to_json())
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def model_config(self) -> ModelConfig:
        unknown = set(self.model) - {f.name for f in dataclasses.fields(ModelConfig)}
        if unknown:
            raise ConfigError(f"model: unknown keys {sorted(unknown)}")
        cfg = ModelConfig.from_json(self.model)
        cfg.validate(pretrain=True)
        return cfg

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        self.data.synth_spec()
        cfg = self.model_config()
        if cfg.n_mels != self.data.n_mels:
            raise ConfigError("model.n_mels must equal data.n_mels")
        if cfg.n_classes != len(self.data.synth_spec().classes):
            raise ConfigError("model.n_classes must equal the number of synthetic classes")
        if self.data.synth_spec().events_per_clip[1] >= cfg.n_queries:
            raise ConfigError("n_queries must exceed the maximum number of events per clip")
        for name in ("n_strong", "n_weak", "n_unlabeled", "n_val"):
            if getattr(self.data, name) < 0:
                raise ConfigError(f"data.{name} must be non-negative")

    def to_json(self) -> dict:
        return _to_json(self)


def _to_json(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_json(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_json(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_json(v) for k, v in obj.items()}
    return obj


def _coerce(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, path) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} values")
        return tuple(_coerce(a, v, path) for a, v in zip(args, value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return value
    return value


def _build(cls, values: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    default = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub = f"{path}.{f.name}" if path else f.name
        if f.name not in values:
            kwargs[f.name] = getattr(default, f.name)
            continue
        v = values[f.name]
        if dataclasses.is_dataclass(hints[f.name]):
            base = _to_json(getattr(default, f.name))
            merged = {**base, **v} if isinstance(v, dict) else v
            kwargs[f.name] = _coerce(hints[f.name], merged, sub)
        elif hints[f.name] is dict and isinstance(v, dict) and f.name == "model":
            kwargs[f.name] = {**getattr(default, f.name), **v}
        else:
            kwargs[f.name] = _coerce(hints[f.name], v, sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(values: dict) -> RunConfig:
    cfg = _build(RunConfig, values, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    values = json.loads(Path(path).read_text()) if path else {}
    for dotted, v in (overrides or {}).items():
        node = values
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = v
    return from_dict(values)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))


__all__ = ["RunConfig", "DataConfig", "EvalConfig", "PretrainSection", "load_config", "save_config",
           "from_dict", "ConfigError", "LossWeights", "MatchWeights"]

"""One flat JSON config with sections ``model``, ``train``, ``loss`` and ``eval``."""

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig

SEED_ENV = "LATENTMOTION_SEED"


@dataclass
class EvalConfig:
    metric: str = "fvd"
    extractor: Optional[str] = None
    n: Optional[int] = None
    clip_len: int = 25
    length: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.metric not in ("fid", "fvd", "acd"):
            raise ConfigError(f"eval.metric must be one of fid, fvd, acd; got {self.metric!r}")
        if self.n is not None and (not isinstance(self.n, int) or self.n < 2):
            raise ConfigError(f"eval.n must be an integer >= 2, got {self.n!r}")
        for name in ("clip_len", "length"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 2:
                raise ConfigError(f"eval.{name} must be an integer >= 2, got {getattr(self, name)!r}")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "loss": LossWeights, "eval": EvalConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    dataset: Optional[str] = None

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        out["dataset"] = self.dataset
        return out


def _check_type(section: str, f: dataclasses.Field, value: Any):
    default = f.default if f.default is not dataclasses.MISSING else None
    where = f"{section}.{f.name}"
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def _section(name: str, data: Any):
    cls = SECTIONS[name]
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}: unknown field")
        _check_type(name, fields[key], value)
    kwargs = dict(data)
    if cls is LossWeights:
        kwargs = {k: float(v) for k, v in kwargs.items()}
    return cls(**kwargs)


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    for key in data:
        if key not in SECTIONS and key != "dataset":
            raise ConfigError(f"{key}: unknown config section")
    sections = {name: _section(name, data.get(name, {})) for name in SECTIONS}
    dataset = data.get("dataset")
    if dataset is not None and not isinstance(dataset, str):
        raise ConfigError(f"dataset: expected a path string, got {dataset!r}")
    return RunConfig(dataset=dataset, **sections)


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


def apply_overrides(data: Dict[str, Any], overrides) -> Dict[str, Any]:
    """Applies ``section.key=value`` strings; values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if key == "dataset":
            data["dataset"] = value
            continue
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.field")
        section, name = key.split(".", 1)
        data.setdefault(section, {})[name] = value
    return data


def default_seed(explicit: Optional[int] = None) -> int:
    if explicit is not None:
        return explicit
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None

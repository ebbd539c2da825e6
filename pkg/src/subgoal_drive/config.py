"""Run configuration: every tunable under a namespaced key, loadable from JSON or key=value text."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .evaluation import EvalConfig
from .expert import ExpertConfig
from .model import Arch, ModelDims
from .pipeline import DataConfig
from .sim import ChannelMode, SimConfig
from .training import TrainConfig

RESOLVED_NAME = "config.json"


@dataclass(frozen=True)
class ModelConfig:
    arch: str = Arch.ANGLE_BRANCHED.value
    channels: str = ChannelMode.ASD.value
    seed: int = 0
    dims: ModelDims = field(default_factory=ModelDims)

    def __post_init__(self):
        try:
            Arch(self.arch)
            ChannelMode(self.channels)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


SECTIONS = {"sim": SimConfig, "expert": ExpertConfig, "data": DataConfig, "model": ModelConfig,
            "train": TrainConfig, "eval": EvalConfig}


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        if self.model.dims.k != self.data.k:
            raise ConfigError(f"model.dims.k={self.model.dims.k} must equal data.k={self.data.k}")

    def to_flat(self) -> dict:
        return _flatten(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), indent=2, sort_keys=True)

    def write(self, directory) -> Path:
        p = Path(directory) / RESOLVED_NAME
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_json() + "\n")
        return p


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = prefix + k
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(value, default):
    """Coerce a parsed value to the type of the field default."""
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return bool(value)
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"not an integer: {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return tuple(_coerce(v, default[0]) if default else v for v in value)
    return value


def _build(cls, values: dict, prefix: str):
    kwargs = {}
    by_name = {f.name: f for f in fields(cls)}
    nested = {}
    for key, value in values.items():
        head, _, rest = key.partition(".")
        if head not in by_name:
            raise ConfigError(f"unknown config key {prefix}{key}")
        f = by_name[head]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if dataclasses.is_dataclass(default):
            if not rest:
                raise ConfigError(f"{prefix}{key} is a section, not a value")
            nested.setdefault(head, {})[rest] = value
        else:
            if rest:
                raise ConfigError(f"unknown config key {prefix}{key}")
            try:
                kwargs[head] = _coerce(value, default) if value is not None else None
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {prefix}{key}: {exc}") from exc
    for head, sub in nested.items():
        f = by_name[head]
        sub_cls = type(f.default_factory()) if f.default is dataclasses.MISSING else type(f.default)
        kwargs[head] = _build(sub_cls, sub, f"{prefix}{head}.")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix.rstrip('.') or 'run'} config: {exc}") from exc


def config_from_flat(values: dict) -> RunConfig:
    return _build(RunConfig, dict(values), "")


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignments(lines) -> dict:
    out = {}
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = parse_value(v.strip())
    return out


def read_config_file(path) -> dict:
    """Flat key dict from a JSON object (nested or dotted) or key=value lines."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    if text.lstrip().startswith("{"):
        try:
            return _flatten(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    return parse_assignments(text.splitlines())


def load_config(path=None, overrides=None) -> RunConfig:
    """File values first, then ``overrides`` (flags win)."""
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    return config_from_flat(values)

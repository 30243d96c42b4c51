"""Experiment configuration and its plain-text ``key = value`` format.

Keys are dot-paths into :class:`ExperimentConfig`, e.g.::

    # imbalance profile (required in every config file)
    data.snr.R = 8
    data.snr.L = 6
    data.snr.M = 1
    data.snr.W = 0.5
    model.fusion = attention
    balance.window_epochs = 15

Unknown keys are rejected. Omitted keys keep their defaults.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .balance import AwcConfig
from .data import DataConfig
from .errors import ConfigError
from .models import FUSIONS, MODALITIES, ModelConfig

REQUIRED_KEYS = tuple(f"data.snr.{m}" for m in MODALITIES)
# model.input_dims / model.joints always follow the data section
_DERIVED = {"model.input_dims", "model.joints"}


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    lr_step_epochs: int = 30
    lr_gamma: float = 0.1


@dataclass
class RunConfig:
    epochs: int = 40
    seed: int = 0
    batch_size: int = 64
    out_dir: str = "runs/default"
    log_every: int = 1
    modalities: str = "RLMW"
    score_shapley: bool = True
    eval_batch_size: int = 512


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    balance: AwcConfig = field(default_factory=AwcConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, input_dims=dict(self.data.input_dims), joints=self.data.joints)

    def validate(self) -> "ExperimentConfig":
        self.data.validate()
        self.balance.validate()
        if self.model.fusion not in FUSIONS:
            raise ConfigError(f"model.fusion must be one of {FUSIONS}, got {self.model.fusion!r}")
        if self.run.epochs < 0:
            raise ConfigError("run.epochs must be >= 0")
        if self.run.batch_size < 2:
            raise ConfigError("run.batch_size must be >= 2")
        mods = self.run.modalities
        if not mods or any(m not in MODALITIES for m in mods) or len(set(mods)) != len(mods):
            raise ConfigError(f"run.modalities must be a non-empty subset of {''.join(MODALITIES)}, got {mods!r}")
        if self.optim.lr_step_epochs < 1:
            raise ConfigError("optim.lr_step_epochs must be >= 1")
        return self

    def players(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.run.modalities)


# -- flattening ----------------------------------------------------------------


def to_flat(cfg: ExperimentConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}

    def walk(prefix: str, obj: Any) -> None:
        if dataclasses.is_dataclass(obj):
            for f in dataclasses.fields(obj):
                walk(f"{prefix}.{f.name}" if prefix else f.name, getattr(obj, f.name))
        elif isinstance(obj, dict):
            for k, v in obj.items():
                walk(f"{prefix}.{k}", v)
        elif not any(prefix == d or prefix.startswith(d + ".") for d in _DERIVED):
            out[prefix] = obj

    walk("", cfg)
    return out


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    return str(value)


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in to_flat(cfg).items())


def _coerce(key: str, raw: str, current: Any) -> Any:
    text = raw.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            items = ast.literal_eval(text) if text.startswith(("[", "(")) else [t for t in text.split(",") if t.strip()]
            return tuple(int(v) for v in items)
        if isinstance(current, str):
            return text.strip("\"'")
    except (ValueError, SyntaxError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    raise ConfigError(f"{key}: unsupported value type {type(current).__name__}")


def set_key(cfg: ExperimentConfig, key: str, raw: str) -> None:
    if key in _DERIVED or any(key.startswith(d + ".") for d in _DERIVED):
        raise ConfigError(f"unknown key {key} (derived from the data section)")
    parts = key.split(".")
    obj: Any = cfg
    for i, part in enumerate(parts[:-1]):
        if dataclasses.is_dataclass(obj) and part in {f.name for f in dataclasses.fields(obj)}:
            obj = getattr(obj, part)
        elif isinstance(obj, dict) and part in obj:
            obj = obj[part]
        else:
            raise ConfigError(f"unknown key {key}")
    last = parts[-1]
    if dataclasses.is_dataclass(obj) and last in {f.name for f in dataclasses.fields(obj)}:
        current = getattr(obj, last)
        if dataclasses.is_dataclass(current) or isinstance(current, dict):
            raise ConfigError(f"{key} is a section, not a value")
        setattr(obj, last, _coerce(key, raw, current))
    elif isinstance(obj, dict) and last in obj:
        obj[last] = _coerce(key, raw, obj[last])
    else:
        raise ConfigError(f"unknown key {key}")


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, value = text.partition("=")
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key}")
        pairs[key] = value.strip()
    return pairs


def apply_overrides(cfg: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    for key, value in pairs.items():
        set_key(cfg, key, value)
    return cfg


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    pairs = parse_lines(text.splitlines(), source)
    missing = [k for k in REQUIRED_KEYS if k not in pairs]
    if missing:
        raise ConfigError(f"{source}: missing required key {missing[0]}")
    return apply_overrides(ExperimentConfig(), pairs).validate()


def load(path) -> ExperimentConfig:
    path = Path(path)
    return loads(path.read_text(), str(path))


def parse_set(items: Iterable[str]) -> dict[str, str]:
    """``--set key=value`` arguments to a dict."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        out[k.strip()] = v.strip()
    return out

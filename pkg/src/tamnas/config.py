"""Experiment configuration: typed sections, YAML/JSON files, hashing.

A config file only needs the keys it changes; everything else comes from
the preset's defaults (the full preset carries the published settings,
the mini preset a scaled-down copy). Unknown keys are rejected before any
compute starts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass
from pathlib import Path

import yaml

from .adversarial import GRID_EPSILONS, GRID_STEPS, AttackSpec, TradesConfig
from .analysis import SubnetSchedule, default_subnet_schedule
from .errors import ConfigError, TamNasError
from .nsga import SearchConfig
from .space import PRESETS, get_preset
from .supernet import TrainSchedule, default_schedule


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"  # or "cifar10"
    path: str | None = None  # CIFAR-10 directory of .bin batches
    classes: int = 4
    samples: int = 1024
    test_samples: int = 256
    image_size: int = 16
    noise: float = 0.3
    val_fraction: float = 0.1
    augment: bool = True


@dataclass(frozen=True)
class SearchSection:
    nsga: SearchConfig = SearchConfig()
    attack: AttackSpec = AttackSpec(steps=10)
    val_samples: int | None = None  # cap on validation images used for fitness


@dataclass(frozen=True)
class SubnetSection:
    schedule: SubnetSchedule = SubnetSchedule()
    inits: tuple = ("scratch", "finetune")


@dataclass(frozen=True)
class AnalysisSection:
    top_k: int = 10
    key: str = "adv_error"
    grid_epsilons: tuple = GRID_EPSILONS
    grid_steps: tuple = GRID_STEPS


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "tamnas"
    preset: str = "full"
    seed: int = 0
    output: str | None = None  # root directory; TAMNAS_OUT or ./out when unset
    data: DataConfig = DataConfig()
    supernet: TrainSchedule = TrainSchedule()
    trades: TradesConfig = TradesConfig()
    attack: AttackSpec = AttackSpec()
    search: SearchSection = SearchSection()
    subnet: SubnetSection = SubnetSection()
    analysis: AnalysisSection = AnalysisSection()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        """Hash of everything that affects results (the output root excluded)."""
        d = self.to_dict()
        d.pop("output", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def default_config(preset: str = "full") -> ExperimentConfig:
    """Published settings for ``full``; a desk-scale copy for ``mini``."""
    p = get_preset(preset)
    if preset == "full":
        data = DataConfig(kind="cifar10", classes=10, samples=50_000, test_samples=10_000, image_size=32)
        return ExperimentConfig(preset=preset, data=data)
    data = DataConfig(classes=p.classes, image_size=p.input_size)
    search = SearchSection(nsga=SearchConfig(), attack=AttackSpec(steps=5), val_samples=64)
    return ExperimentConfig(
        preset=preset,
        data=data,
        supernet=default_schedule(p),
        search=search,
        subnet=SubnetSection(schedule=default_subnet_schedule(p)),
    )


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _overlay(base, updates: dict, where: str):
    if not isinstance(updates, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(updates).__name__}")
    hints = typing.get_type_hints(type(base))
    names = {f.name for f in dataclasses.fields(base)}
    unknown = sorted(set(updates) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    changes = {}
    for key, value in updates.items():
        path = f"{where}.{key}" if where else key
        current = getattr(base, key)
        if dataclasses.is_dataclass(current):
            changes[key] = _overlay(current, value, path)
        else:
            changes[key] = _coerce(value, hints[key], path)
    try:
        return dataclasses.replace(base, **changes)
    except TamNasError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(d: dict, preset: str | None = None) -> ExperimentConfig:
    d = dict(d or {})
    name = preset or d.get("preset", "full")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d["preset"] = name
    cfg = _overlay(default_config(name), d, "")
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.data.kind not in ("synthetic", "cifar10"):
        raise ConfigError(f"data.kind must be 'synthetic' or 'cifar10', got {cfg.data.kind!r}")
    if cfg.data.kind == "cifar10" and cfg.preset != "full":
        raise ConfigError("CIFAR-10 data needs the full (32x32, 10-class) preset")
    p = get_preset(cfg.preset)
    if cfg.data.kind == "synthetic" and (cfg.data.classes != p.classes or cfg.data.image_size != p.input_size):
        raise ConfigError(
            f"synthetic data ({cfg.data.classes} classes, {cfg.data.image_size}px) does not match "
            f"preset {p.name!r} ({p.classes} classes, {p.input_size}px)"
        )
    if not 0.0 < cfg.data.val_fraction < 1.0:
        raise ConfigError(f"data.val_fraction must lie in (0, 1), got {cfg.data.val_fraction}")
    if cfg.search.nsga.parent_size < 2 or cfg.search.nsga.offspring_size < 1:
        raise ConfigError("search needs parent_size >= 2 and offspring_size >= 1")
    for init in cfg.subnet.inits:
        if init not in ("scratch", "finetune"):
            raise ConfigError(f"subnet.inits entries must be 'scratch' or 'finetune', got {init!r}")
    if cfg.analysis.key not in ("clean_error", "adv_error", "params"):
        raise ConfigError(f"analysis.key {cfg.analysis.key!r} is not an objective")


def load_config(path, preset: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text()) if path.suffix != ".json" else json.loads(path.read_text())
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(raw or {}, preset)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))

"""Run configuration: nested sections addressed by dotted keys.

Sections: ``data``, ``backbone``, ``loss``, ``sampler``, ``train``, ``synth``.
A YAML file may nest keys (``loss: {tau: 0.1}``) or spell them dotted
(``loss.tau: 0.1``). ``--set key=value`` overrides are parsed as YAML scalars
and checked against the type of the default.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .losses import LossConfig
from .network import BackboneConfig
from .sampler import SamplerConfig
from .synthdata import SynthConfig


@dataclass
class DataConfig:
    root: str = "data"
    train: str = "train.tsv"
    query: str = "query.tsv"
    gallery: str = "gallery.tsv"
    vocabulary: str | None = None
    fill: float = 0.0


@dataclass
class ModelConfig:
    """Backbone plus the attention kernel size (stored under ``backbone``)."""

    arch: str = "small-conv"
    widths: tuple[int, ...] = (16, 32, 64, 64)
    output_stride: int = 8
    pretrained_path: str | None = None
    ikt_kernel: int = 7

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.arch, self.widths, self.output_stride, self.pretrained_path)


@dataclass
class TrainConfig:
    phase1_epochs: int = 30
    phase2_epochs: int = 60
    lr: float = 3.5e-4
    weight_decay: float = 5e-4
    milestones: tuple[float, ...] = (0.6, 0.8)
    gamma: float = 0.1
    seed: int = 0
    flip: bool = True
    variant: str = "ifd"
    freeze_attention: bool = False

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not self.lr >= 0:
            raise ConfigError("learning rate must be >= 0")


SECTIONS = {
    "data": DataConfig,
    "backbone": ModelConfig,
    "loss": LossConfig,
    "sampler": SamplerConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
}
# file keys that differ from the python field names
ALIASES = {("loss", "lambda"): "lam"}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        out = {}
        for name in SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            inverse = {v: k for (s, k), v in ALIASES.items() if s == name}
            out[name] = {inverse.get(k, k): list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")

    def hash(self, exclude: tuple[str, ...] = ("train.variant",)) -> str:
        flat = {k: v for k, v in flatten(self.to_dict()).items() if k not in exclude}
        return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        return build_config({**flatten(self.to_dict()), **overrides})


def flatten(tree: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, path + "."))
        else:
            flat[path] = value
    return flat


def _coerce(section: str, name: str, value: Any, default: Any) -> Any:
    where = f"{section}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} expects a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{where} expects a string, got {value!r}")
        return value
    return value


def build_config(flat: dict[str, Any]) -> RunConfig:
    values: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        name = ALIASES.get((section, name), name)
        defaults = {f.name: getattr(SECTIONS[section](), f.name) for f in dataclasses.fields(SECTIONS[section])}
        if name not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        values[section][name] = _coerce(section, name, value, defaults[name])
    try:
        return RunConfig(**{name: SECTIONS[name](**kw) for name, kw in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_override(text: str) -> tuple[str, Any]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    return key.strip(), yaml.safe_load(raw) if raw.strip() else None


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    flat: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        flat.update(flatten(raw))
    for item in overrides or []:
        key, value = parse_override(item)
        flat[key] = value
    return build_config(flat)

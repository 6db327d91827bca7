"""YAML run configuration.

One file describes a full run: model dimensions and feature flags, the
keyframe coder dimensions, training hyperparameters and codec settings.
Unknown keys are rejected so typos fail loudly instead of silently using
defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import yaml

from .models import ModelConfig
from .training import TrainConfig


class ConfigError(Exception):
    pass


@dataclass
class KeyframeConfig:
    filters: int = 64
    latent: int = 64
    hyper: int = 32


@dataclass
class CodecConfig:
    gop_size: int = 8
    lambda_id: int = 0

    def __post_init__(self):
        if self.gop_size < 1 or (self.gop_size & (self.gop_size - 1)) != 0:
            raise ConfigError(f"gop_size must be a power of two, got {self.gop_size}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    keyframe: KeyframeConfig = field(default_factory=KeyframeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)


_SECTIONS = {
    "model": ModelConfig,
    "keyframe": KeyframeConfig,
    "train": TrainConfig,
    "codec": CodecConfig,
}


def _build(cls, data: dict, path: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {sorted(unknown)}")
    if "mask_widths" in data and data["mask_widths"] is not None:
        data = dict(data, mask_widths=tuple(data["mask_widths"]))
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {path} section: {e}") from e


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level sections: {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if section is None:
            section = {}
        if not isinstance(section, dict):
            raise ConfigError(f"section {name} must be a mapping")
        kwargs[name] = _build(cls, dict(section), name)
    return RunConfig(**kwargs)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    return config_from_dict(raw)

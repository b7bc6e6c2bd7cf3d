"""Configuration records and JSON loading.

A config file is a JSON object with optional top-level sections ``model``,
``loss``, ``train``, ``aug``, ``eval`` and ``synth``; every field has a
default so ``{}`` is a valid config.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

from .errors import ConfigError

BRANCHES = ("spatial", "channel", "global", "local")


@dataclass
class ModelConfig:
    trunk_widths: Tuple[int, ...] = (16, 32, 64)
    trunk_strides: Tuple[int, ...] = (2, 2, 2)
    branch_channels: int = 128
    reduction_width: int = 64
    input_height: int = 96
    input_width: int = 32
    n_stripes: int = 3
    leaky_slope: float = 0.01
    dropout: float = 0.5
    n_classes: int = 0  # 0: take from the manifest at train time
    branches: Tuple[str, ...] = BRANCHES
    share_branch_init: bool = False
    seed: int = 0

    @property
    def feature_height(self) -> int:
        h = self.input_height
        for s in self.trunk_strides:
            h = -(-h // s)
        return h

    @property
    def feature_width(self) -> int:
        w = self.input_width
        for s in self.trunk_strides:
            w = -(-w // s)
        return w

    def validate(self) -> None:
        if len(self.trunk_widths) != len(self.trunk_strides) or not self.trunk_widths:
            raise ConfigError("trunk_widths and trunk_strides must be non-empty and of equal length")
        widths = (*self.trunk_widths, self.branch_channels, self.reduction_width, self.input_height, self.input_width)
        if min(widths) <= 0 or self.n_stripes <= 0:
            raise ConfigError("all widths, sizes and n_stripes must be positive")
        unknown = set(self.branches) - set(BRANCHES)
        if unknown or not self.branches:
            raise ConfigError(f"branches must be a non-empty subset of {BRANCHES}, got {self.branches}")
        if "spatial" in self.branches and (self.branch_channels % 8 or self.trunk_widths[-1] % 8):
            raise ConfigError("SAM-RPE needs trunk output and branch channels divisible by 8 (d_k = C/8)")
        if "local" in self.branches and self.feature_height % self.n_stripes:
            raise ConfigError(
                f"feature-map height {self.feature_height} is not divisible by n_stripes={self.n_stripes}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class LossConfig:
    beta: float = 0.1
    margin: float = 1.2
    epsilon: float = 0.1
    P: int = 5
    K: int = 4
    reduction: str = "sum"

    def validate(self) -> None:
        if self.beta < 0 or self.margin < 0:
            raise ConfigError("beta and margin must be non-negative")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.P < 2 or self.K < 2:
            raise ConfigError(f"batch-hard mining needs P >= 2 and K >= 2, got P={self.P}, K={self.K}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


@dataclass
class TrainConfig:
    epochs: int = 70
    base_lr: float = 8e-4
    warmup_start_lr: float = 8e-6
    warmup_epochs: int = 10
    decay: Dict[int, float] = field(default_factory=lambda: {41: 4e-4, 61: 2e-4})
    weight_decay: float = 5e-4
    backbone_lr_divisor: float = 10.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be <= epochs ({self.epochs})")
        rates = [self.base_lr, self.warmup_start_lr, *self.decay.values(), self.backbone_lr_divisor]
        if min(rates) <= 0:
            raise ConfigError("learning rates and the backbone divisor must be positive")


@dataclass
class AugConfig:
    resize_factor: float = 9 / 8
    flip_p: float = 0.5
    jitter: float = 0.15
    erase_p: float = 0.5
    erase_area: Tuple[float, float] = (0.02, 0.4)
    erase_aspect: Tuple[float, float] = (0.3, 3.33)
    mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    enabled: bool = True

    def validate(self) -> None:
        for p in (self.flip_p, self.erase_p):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probabilities must lie in [0, 1], got {p}")
        lo, hi = self.erase_area
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError(f"erase_area must lie within (0, 1), got {self.erase_area}")
        if not 0.0 < self.erase_aspect[0] <= self.erase_aspect[1]:
            raise ConfigError(f"invalid erase_aspect {self.erase_aspect}")
        if not 0.0 <= self.jitter < 1.0 or self.resize_factor < 1.0:
            raise ConfigError("jitter must lie in [0, 1) and resize_factor must be >= 1")


@dataclass
class EvalConfig:
    camera_filter: Optional[bool] = None  # None: on iff the data has more than one camera
    flip_average: bool = True
    ranks: Tuple[int, ...] = (1, 5, 10)


@dataclass
class SynthSpec:
    n_identities: int = 20
    images_per_identity: int = 30
    height: int = 96
    width: int = 32
    n_cameras: int = 2
    seed: int = 7
    queries_per_identity: int = 5
    brightness: float = 0.15
    translation: float = 0.1
    noise: float = 0.05
    protocol: str = "closed"

    def validate(self) -> None:
        if self.n_identities < 2 or self.images_per_identity < 2:
            raise ConfigError("synthetic data needs >= 2 identities and >= 2 images per identity")
        if self.protocol not in ("closed", "open"):
            raise ConfigError(f"protocol must be 'closed' or 'open', got {self.protocol!r}")
        if self.n_cameras < 1 or not 0.0 <= self.translation <= 0.1:
            raise ConfigError("n_cameras must be >= 1 and translation within [0, 0.1]")
        if self.protocol == "closed" and self.queries_per_identity + 2 > self.images_per_identity:
            raise ConfigError("closed protocol needs images for gallery, queries and at least one train image")


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)


def _build(cls, raw):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section for {cls.__name__} must be a JSON object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        elif isinstance(default, dict) and isinstance(value, dict):
            value = {int(k): float(v) for k, v in value.items()}
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> Config:
    sections = {"model": ModelConfig, "loss": LossConfig, "train": TrainConfig, "aug": AugConfig,
                "eval": EvalConfig, "synth": SynthSpec}
    unknown = set(raw) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = Config(**{k: _build(cls, raw.get(k)) for k, cls in sections.items()})
    for part in (cfg.model, cfg.loss, cfg.train, cfg.aug, cfg.synth):
        part.validate()
    return cfg


def load_config(path: Optional[str]) -> Config:
    if path is None:
        return config_from_dict({})
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)

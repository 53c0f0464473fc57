"""Training configuration and its TOML form."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

from .autodiff import ConfigError
from .regrad import MODES
from .vit import BackboneConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class DataConfig:
    n_live: int = 32
    n_spoof: int = 32
    seed: int = 0
    manifests: dict = field(default_factory=dict)   # domain id -> manifest path; empty = synthetic


@dataclass
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    adapter_width: int = 16
    r_e: float = 1.0
    theta: float = 0.7
    mc_samples: int = 4
    lam: float = 0.3
    lr: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    gate: bool = True
    modulation: bool = True
    regrad_mode: str = "full"
    regrad_uncertainty: bool = True
    prototype_momentum: float = 0.9
    ssp_ema: float = 0.0
    pretrain_epochs: int = 0
    protocol: str = "cps_w"
    missing: str = ""
    imputation: str = "zero"
    eval_every: int = 1
    check_decomposition: bool = False

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        self.validate()

    def validate(self) -> None:
        positive = ("adapter_width", "mc_samples", "lr", "batch_size", "beta1", "beta2", "adam_eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("r_e", "lam", "weight_decay", "epochs", "pretrain_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.mc_samples < 2:
            raise ConfigError("mc_samples must be at least 2")
        if self.regrad_mode not in MODES:
            raise ConfigError(f"regrad_mode must be one of {MODES}")
        if not 0.0 <= self.prototype_momentum <= 1.0 or not 0.0 <= self.ssp_ema < 1.0:
            raise ConfigError("momentum values must lie in [0, 1)")

    @property
    def adapter_r_e(self) -> float:
        return self.r_e if self.gate else 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(dump_toml(self), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


_REFERENCE_NOTE = """\
# Reference-scale values (ImageNet-pretrained ViT-B, real datasets):
#   Adam, lr 5e-5, weight decay 1e-3, 70 epochs, batch 32,
#   224x224x3 inputs, 16x16 patches (14x14 tokens + class token), hidden 768, 12 blocks.
"""


def dump_toml(cfg: TrainConfig) -> str:
    return _REFERENCE_NOTE + tomli_w.dumps(cfg.to_dict())


def paper_fidelity() -> TrainConfig:
    """The reference hyper-parameters; not trainable at desk scale without pretrained weights."""
    return TrainConfig(backbone=BackboneConfig.paper_scale(), adapter_width=384, lr=5e-5,
                       weight_decay=1e-3, epochs=70, batch_size=32)

"""Run configuration: one structured document covering data, net, augmentation, perturbation, loss and training."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from .augment import AugmentConfig
from .datasets import SynthSpec
from .errors import ConfigError
from .featperturb import PerturbConfig
from .losses import LossConfig
from .model import NetConfig

METHODS = ("crossmatch", "fixmatch", "dualstream", "supervised_only")
OPTIMIZERS = ("sgd_momentum", "adamw")
SCHEDULES = ("constant", "poly")


@dataclass(frozen=True)
class DataConfig:
    labeled_fraction: float = 0.05
    split_seed: int = 0
    val_count: int = 50
    num_classes: int = 2
    synth: Optional[SynthSpec] = None

    def __post_init__(self):
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "crossmatch"
    iterations: int = 2000
    epochs: Optional[int] = None
    batch_size: int = 8
    optimizer: str = "sgd_momentum"
    lr: float = 0.01
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    lr_schedule: str = "poly"
    poly_power: float = 0.9
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    naive_mode: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even: half labeled, half unlabeled")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.net.num_classes != self.data.num_classes:
            raise ConfigError("net.num_classes and data.num_classes disagree")

    def to_dict(self):
        return _plain(asdict(self))

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **sections):
        """``cfg.with_overrides(loss={"eta": 0.1}, train={"iterations": 5})``."""
        d = self.to_dict()
        for section, values in sections.items():
            if section not in d:
                raise ConfigError(f"unknown config section {section!r}")
            d[section] = _merge(d[section], values)
        return from_dict(d)

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _merge(base, values):
    if not isinstance(base, dict) or not isinstance(values, dict):
        return values
    out = dict(base)
    for k, v in values.items():
        out[k] = _merge(base.get(k), v) if isinstance(base.get(k), dict) else v
    return out


def _tuplify(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _build(cls, d, name):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    try:
        return cls(**_tuplify(d))
    except TypeError as e:
        raise ConfigError(f"bad section {name!r}: {e}") from e


def from_dict(d) -> RunConfig:
    d = dict(d or {})
    unknown = set(d) - {"data", "net", "augment", "perturb", "loss", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    data = dict(d.get("data") or {})
    synth = data.pop("synth", None)
    data_cfg = _build(DataConfig, data, "data")
    if synth is not None:
        data_cfg = replace(data_cfg, synth=_build(SynthSpec, synth, "data.synth"))
    net = dict(d.get("net") or {})
    net.setdefault("num_classes", data_cfg.num_classes)
    return RunConfig(
        data=data_cfg,
        net=_build(NetConfig, net, "net"),
        augment=AugmentConfig.from_dict(d.get("augment")),
        perturb=_build(PerturbConfig, d.get("perturb"), "perturb"),
        loss=_build(LossConfig, d.get("loss"), "loss"),
        train=_build(TrainConfig, d.get("train"), "train"),
    )


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    return from_dict(raw or {})

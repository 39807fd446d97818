"""Experiment configuration, loaded from YAML (or JSON) key-value files.

Top-level keys mirror :class:`ExperimentConfig` field names; ``dataset``,
``plan`` and ``model`` are nested mappings. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import SyntheticSpec
from .errors import ConfigError
from .fed import RoundConfig
from .graph import SpecializationPlan

ALGORITHMS = ("fedavg", "fedgcn")


@dataclass(frozen=True)
class ModelSpec:
    """Main classifier: ``[conv, relu] * n -> avgpool -> [dense, relu] * m -> dense``."""

    conv_channels: tuple[int, ...] = (8,)
    kernel: int = 3
    pool: int = 2
    hidden: tuple[int, ...] = (32,)
    normalize_inputs: bool = True


@dataclass(frozen=True)
class DatasetSource:
    synthetic: SyntheticSpec | None = None
    json: str | None = None
    input_shape: tuple[int, ...] | None = None
    num_classes: int | None = None
    held_out_fraction: float = 0.2
    split_seed: int = 0

    def __post_init__(self):
        if (self.synthetic is None) == (self.json is None):
            raise ConfigError("dataset needs exactly one of 'synthetic' or 'json'")
        if not 0 < self.held_out_fraction < 1:
            raise ConfigError("held_out_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "fedgcn"
    dataset: DatasetSource = field(default_factory=lambda: DatasetSource(synthetic=SyntheticSpec()))
    # round schedule (defaults follow the CelebA protocol)
    clients_per_round: int = 10
    local_epochs: int = 1
    batch_size: int = 5
    lr: float = 1e-3
    total_rounds: int = 100
    # clustering
    num_domains: int = 4
    teacher_sync_period: int = 10
    student_lr: float = 1e-4
    identical_init: bool = True
    classifier_channels: tuple[int, int] = (32, 64)
    # graph
    beta: float = 0.5
    eps_dist: float = 1e-8
    lambda_init: float = 1.0
    freeze_lambda: bool = False
    plan: SpecializationPlan = field(default_factory=SpecializationPlan)
    bottleneck_threshold: int = 4096
    bottleneck_factor: int = 16
    # harness
    model: ModelSpec = field(default_factory=ModelSpec)
    seed: int = 0
    out_dir: str = "runs/default"
    eval_every: int = 10
    checkpoint_every: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.checkpoint_every < 0 or self.workers < 1:
            raise ConfigError("checkpoint_every must be >= 0 and workers >= 1")
        if self.algorithm == "fedgcn":
            if self.num_domains < 1 or self.teacher_sync_period < 1:
                raise ConfigError("num_domains and teacher_sync_period must be >= 1")
            if not 0 <= self.beta <= 1:
                raise ConfigError("beta must lie in [0, 1]")
            if not self.eps_dist > 0:
                raise ConfigError("eps_dist must be > 0")
            if not self.student_lr >= 0:
                raise ConfigError("student_lr must be non-negative")
        self.round_config()  # validates the schedule

    def round_config(self) -> RoundConfig:
        return RoundConfig(self.clients_per_round, self.local_epochs, self.batch_size, self.lr, self.total_rounds)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    ds = raw.pop("dataset", None)
    if ds is not None:
        if not isinstance(ds, dict):
            raise ConfigError("dataset must be a mapping")
        ds = dict(ds)
        if "synthetic" in ds:
            ds["synthetic"] = _build(SyntheticSpec, ds["synthetic"], "dataset.synthetic")
        raw["dataset"] = _build(DatasetSource, ds, "dataset")
    if "plan" in raw:
        raw["plan"] = _build(SpecializationPlan, raw["plan"], "plan")
    if "model" in raw:
        raw["model"] = _build(ModelSpec, raw["model"], "model")
    return _build(ExperimentConfig, raw, "config")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return config_from_dict(raw or {})


def load_synthetic_spec(path: str | Path) -> SyntheticSpec:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot read spec ({exc})") from exc
    return _build(SyntheticSpec, raw, str(path))

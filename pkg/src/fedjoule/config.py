"""Experiment configuration: a nested YAML file, overridable per key
through FEDJOULE_* environment variables.

An override name is the uppercased path through the sections with double
underscores between levels, e.g. FEDJOULE_STRATEGY__GAMMA=8 or
FEDJOULE_CLUSTER__EDGE_XL=5. Values are parsed as YAML scalars so numbers,
booleans, and null keep their types.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Mapping, Optional

import yaml

from .device_model import DEFAULT_DEVICE_CLASSES, DEFAULT_POWER_NOISE, DEFAULT_TIME_NOISE
from .strategies import STRATEGY_NAMES

ENV_PREFIX = "FEDJOULE_"


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class WorkloadConfig:
    name: str = "synth8"
    classes: int = 8
    dim: int = 32
    train_samples: int = 4800
    val_samples: int = 1600
    class_separation: float = 2.0
    noise_sigma: float = 0.5
    model: str = "logistic"
    hidden: int = 16

    def __post_init__(self) -> None:
        if self.model not in ("logistic", "mlp"):
            raise ConfigError(f"unknown model kind {self.model!r}")
        if self.classes < 2 or self.dim < 1:
            raise ConfigError("workload needs >= 2 classes and >= 1 feature")
        if self.train_samples < 1 or self.val_samples < 1:
            raise ConfigError("train and validation splits must be non-empty")


@dataclass(frozen=True)
class PartitionConfig:
    kind: str = "shard"
    labels_per_client: int = 3
    dirichlet_alpha: float = 0.05

    def __post_init__(self) -> None:
        if self.kind not in ("shard", "dirichlet"):
            raise ConfigError(f"unknown partition kind {self.kind!r}")
        if self.labels_per_client < 1:
            raise ConfigError("labels_per_client must be >= 1")
        if self.dirichlet_alpha <= 0:
            raise ConfigError("dirichlet_alpha must be > 0")


@dataclass(frozen=True)
class StrategyConfig:
    name: str = "fedj_k"
    gamma: int = 6
    alpha: float = 0.5
    rho: float = 0.05
    beta: float = 0.5
    cooldown_accuracy_scale: float = 100.0
    escs_loss_weight: float = 1.0
    escs_time_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.name not in STRATEGY_NAMES:
            raise ConfigError(
                f"unknown strategy {self.name!r}; valid: {', '.join(STRATEGY_NAMES)}"
            )


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 1
    lr: float = 0.5
    batch_size: int = 32


@dataclass(frozen=True)
class CoresetConfig:
    ratio: float = 0.1
    min_per_class: int = 5


@dataclass(frozen=True)
class ProfileNoiseConfig:
    time_noise: float = DEFAULT_TIME_NOISE
    power_noise: float = DEFAULT_POWER_NOISE


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 42
    budget_j: float = 60000.0
    target_accuracy: Optional[float] = None
    cluster: Mapping[str, int] = field(
        default_factory=lambda: {"edge_xl": 3, "edge_l": 3, "edge_m": 3, "edge_s": 3}
    )
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    coreset: CoresetConfig = field(default_factory=CoresetConfig)
    profiles: ProfileNoiseConfig = field(default_factory=ProfileNoiseConfig)

    def __post_init__(self) -> None:
        if not (self.budget_j > 0):
            raise ConfigError("budget_j must be > 0")
        if self.target_accuracy is not None and not (0.0 < self.target_accuracy <= 1.0):
            raise ConfigError("target_accuracy must lie in (0, 1]")
        known = {spec.name for spec in DEFAULT_DEVICE_CLASSES}
        for device, count in self.cluster.items():
            if device not in known:
                raise ConfigError(
                    f"unknown device class {device!r}; valid: {', '.join(sorted(known))}"
                )
            if count < 0:
                raise ConfigError("cluster counts must be >= 0")
        if self.client_count < 1:
            raise ConfigError("cluster must contain at least one client")
        if self.strategy.gamma > self.client_count:
            raise ConfigError(
                f"gamma {self.strategy.gamma} exceeds cluster size {self.client_count}"
            )

    @property
    def client_count(self) -> int:
        return sum(self.cluster.values())


_SECTIONS = {
    "workload": WorkloadConfig,
    "partition": PartitionConfig,
    "strategy": StrategyConfig,
    "training": TrainingConfig,
    "coreset": CoresetConfig,
    "profiles": ProfileNoiseConfig,
}


def config_from_dict(raw: Mapping[str, Any]) -> ExperimentConfig:
    """Build a validated config from nested plain dicts."""
    raw = dict(raw)
    kwargs: Dict[str, Any] = {}
    experiment = raw.pop("experiment", {}) or {}
    if not isinstance(experiment, Mapping):
        raise ConfigError("'experiment' must be a mapping")
    kwargs.update(experiment)
    cluster = raw.pop("cluster", None)
    if cluster is not None:
        if not isinstance(cluster, Mapping):
            raise ConfigError("'cluster' must be a mapping of device class to count")
        kwargs["cluster"] = dict(cluster)
    for section, cls in _SECTIONS.items():
        body = raw.pop(section, None)
        if body is None:
            continue
        if not isinstance(body, Mapping):
            raise ConfigError(f"{section!r} must be a mapping")
        try:
            kwargs[section] = cls(**body)
        except TypeError as exc:
            raise ConfigError(f"bad {section} settings: {exc}") from None
    if raw:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(raw))}")
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad experiment settings: {exc}") from None


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Nested plain-dict form, the inverse of config_from_dict."""
    whole = asdict(cfg)
    out: Dict[str, Any] = {
        "experiment": {
            "master_seed": whole.pop("master_seed"),
            "budget_j": whole.pop("budget_j"),
            "target_accuracy": whole.pop("target_accuracy"),
        },
        "cluster": whole.pop("cluster"),
    }
    out.update(whole)
    return out


def apply_env_overrides(
    raw: Mapping[str, Any], environ: Mapping[str, str] = os.environ
) -> Dict[str, Any]:
    """Overlay FEDJOULE_* variables onto a nested config dict."""
    merged: Dict[str, Any] = copy.deepcopy(dict(raw))
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        if not all(path):
            raise ConfigError(f"malformed override variable {name}")
        node = merged
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(
                    f"override {name} descends into non-section key {part!r}"
                )
            node = child
        node[path[-1]] = yaml.safe_load(environ[name])
    return merged


def load_config(
    path: str, environ: Mapping[str, str] = os.environ
) -> ExperimentConfig:
    """Read a YAML config file and apply environment overrides."""
    with open(path) as handle:
        raw = yaml.safe_load(handle)
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    return config_from_dict(apply_env_overrides(raw, environ))


def save_config(cfg: ExperimentConfig, path: str) -> None:
    """Write a config as YAML, round-trippable through load_config."""
    with open(path, "w") as handle:
        yaml.safe_dump(config_to_dict(cfg), handle, sort_keys=False)

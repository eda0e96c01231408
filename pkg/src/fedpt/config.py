"""Experiment configuration: a flat TOML table validated into ``ExperimentConfig``."""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dp import DpConfig
from .errors import ConfigError, FormatError
from .fed import EngineConfig, OptimizerConfig
from .model import FreezePlan, Model, ModelSpec, build_model, emnist_cnn_spec, mlp_spec
from .optim import KINDS

MODELS = ("mlp", "emnist_cnn")
DATASETS = ("mixture", "image_mixture")
PARTITIONS = ("dirichlet", "iid")
REQUIRED = ("model", "rounds", "clients_per_round")


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    rounds: int
    clients_per_round: int
    preset: str | None = None
    hidden: int = 512
    freeze: tuple[str, ...] = ()
    protect_norm: bool = True
    client_optimizer: str = "sgd"
    client_lr: float = 0.1
    client_momentum: float = 0.9
    server_optimizer: str = "sgd"
    server_lr: float = 1.0
    server_momentum: float = 0.9
    batch_size: int = 16
    local_steps: int | str = "epoch"
    weighting: str = "examples"
    clip_norm: float | None = None
    dp: bool = False
    noise_multiplier: float = 0.0
    report_goal: int | None = None
    data: str = "mixture"
    num_classes: int = 4
    dim: int = 32
    separation: float = 6.0
    noise_std: float = 1.0
    partition: str = "dirichlet"
    alpha: float = 1.0
    num_clients: int = 40
    examples_per_client: int = 100
    eval_examples: int = 1000
    eval_every: int = 10
    seed: int = 0
    fedavg_baseline: bool = False
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "freeze", tuple(self.freeze))
        if self.model not in MODELS:
            raise ConfigError(f"model: unknown {self.model!r}; choose from {MODELS}")
        if self.rounds < 1:
            raise ConfigError("rounds: must be >= 1")
        if self.clients_per_round < 1:
            raise ConfigError("clients_per_round: must be >= 1")
        if self.clients_per_round > self.num_clients:
            raise ConfigError("clients_per_round: exceeds num_clients")
        for key in ("client_optimizer", "server_optimizer"):
            if getattr(self, key) not in KINDS:
                raise ConfigError(f"{key}: unknown optimizer {getattr(self, key)!r}")
        for key in ("client_lr", "server_lr"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be non-negative")
        if not (self.local_steps == "epoch" or (isinstance(self.local_steps, int) and self.local_steps >= 0)):
            raise ConfigError("local_steps: must be 'epoch' or a non-negative integer")
        if self.data not in DATASETS:
            raise ConfigError(f"data: unknown {self.data!r}; choose from {DATASETS}")
        if self.partition not in PARTITIONS:
            raise ConfigError(f"partition: unknown {self.partition!r}; choose from {PARTITIONS}")
        if self.model == "emnist_cnn" and self.data != "image_mixture":
            raise ConfigError("data: the emnist_cnn model needs data = 'image_mixture'")
        if self.eval_every < 1:
            raise ConfigError("eval_every: must be >= 1")
        if self.dp and self.fedavg_baseline:
            raise ConfigError("dp: not available together with fedavg_baseline")
        # construction-time checks that need the built objects
        self.engine_config()
        self.freeze_plan().resolve(self.build_model())

    def build_model(self) -> Model:
        return build_model(self.model_spec())

    def model_spec(self) -> ModelSpec:
        if self.model == "emnist_cnn":
            return emnist_cnn_spec(self.num_classes)
        return mlp_spec(self.dim, self.hidden, self.num_classes)

    def freeze_plan(self) -> FreezePlan:
        return FreezePlan(frozenset(self.freeze), self.protect_norm)

    def dp_config(self) -> DpConfig | None:
        if not self.dp:
            return None
        from .rng import derive_seed

        return DpConfig(
            clip_norm=0.3 if self.clip_norm is None else self.clip_norm,
            noise_multiplier=self.noise_multiplier,
            report_goal=self.report_goal or self.clients_per_round,
            noise_seed=derive_seed(self.seed, "dp-noise"),
        )

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            clients_per_round=self.clients_per_round,
            batch_size=self.batch_size,
            local_steps=None if self.local_steps == "epoch" else int(self.local_steps),
            client_opt=OptimizerConfig(self.client_optimizer, self.client_lr, self.client_momentum),
            server_opt=OptimizerConfig(self.server_optimizer, self.server_lr, self.server_momentum),
            seed=self.seed,
            weighting=self.weighting,
            clip_norm=None if self.dp else self.clip_norm,
            dp=self.dp_config(),
            workers=self.workers,
            fedavg_baseline=self.fedavg_baseline,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return from_mapping({**self.to_dict(), **changes})

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# Per-task optimizer settings; only emnist-cnn has a model built here, the rest need model = "mlp".
PRESETS: dict[str, dict[str, Any]] = {
    "emnist-cnn": dict(
        model="emnist_cnn", data="image_mixture", num_classes=62, rounds=1500, clients_per_round=20,
        batch_size=16, client_optimizer="sgd", client_lr=0.05, server_optimizer="sgd", server_lr=0.5,
    ),
    "cifar10": dict(
        rounds=1500, clients_per_round=10, batch_size=128, client_optimizer="sgdm", client_lr=10**-0.5,
        server_optimizer="sgdm", server_lr=10**-1.0, server_momentum=0.9, num_classes=10, alpha=1.0,
        num_clients=500, examples_per_client=100,
    ),
    "so-nwp": dict(
        rounds=5000, clients_per_round=32, batch_size=16, client_optimizer="adam", client_lr=0.1,
        server_optimizer="adam", server_lr=0.03,
    ),
    "so-nwp-dp": dict(
        rounds=1600, clients_per_round=100, report_goal=100, batch_size=16, client_optimizer="sgd",
        server_optimizer="sgdm", server_momentum=0.9, dp=True, clip_norm=0.3,
    ),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value: Any) -> Any:
    t = _FIELD_TYPES[key]
    if key == "freeze":
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            raise ConfigError("freeze: must be a list of block names")
        return tuple(value)
    if key == "local_steps":
        if value == "epoch" or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError("local_steps: must be 'epoch' or an integer")
    if t == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if "float" in t:
        if value is None and "None" in t:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if "int" in t:
        if value is None and "None" in t:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if not isinstance(value, str) and value is not None:
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def from_mapping(raw: Mapping[str, Any]) -> ExperimentConfig:
    unknown = sorted(set(raw) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged: dict[str, Any] = {}
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown {preset!r}; choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    merged.update(raw)
    for key in REQUIRED:
        if key not in merged:
            raise ConfigError(f"missing required field: {key}")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in merged.items()})


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return from_mapping(raw)


def load_grid(path) -> dict[str, list]:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return validate_grid(raw)


def validate_grid(grid: Mapping[str, Any]) -> dict[str, list]:
    if not grid:
        raise ConfigError("grid is empty")
    out = {}
    for key, values in grid.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"grid: unknown config key {key!r}")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid: {key} must map to a non-empty list")
        out[key] = list(values)
    return out

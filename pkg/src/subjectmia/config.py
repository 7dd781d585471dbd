"""Experiment configuration and its on-disk (YAML) form."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dpcore import DpConfig

GRID_DOMAINS = {
    "d": (2, 50, 250, 1000),
    "sampling": ("standard", "dirichlet"),
    "users": (10, 100),
    "subjects_per_user": (10, 100, 500),
    "items_per_user": (500, 2000, 10000),
}
ROUNDS_RANGE = (1, 50)

# hidden-layer stacks standing in for the "number of layers" axis of the grid
LAYER_PRESETS = {1: (8,), 2: (32, 8), 3: (128, 32, 8)}

# file section -> fields stored in it
SECTIONS = {
    "data": ("d", "sampling", "alpha", "mean_box"),
    "federation": ("users", "subjects_per_user", "items_per_user", "participation"),
    "model": ("hidden",),
    "training": ("rounds", "local_epochs", "batch_size", "optimizer", "learning_rate"),
    "attack": ("access_mode", "validation_subject_count", "max_attack_samples", "objective"),
    "evaluation": ("test_size",),
}
TOP_LEVEL = ("seed", "custom", "dp")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    d: int = 2
    sampling: str = "standard"
    alpha: float = 1.0
    mean_box: float | None = None
    users: int = 10
    subjects_per_user: int = 10
    items_per_user: int = 500
    participation: float = 1.0
    hidden: tuple = (8,)
    rounds: int = 25
    local_epochs: int = 1
    batch_size: int = 512
    optimizer: str = "adam"
    learning_rate: float = 0.001
    dp: DpConfig | None = None
    access_mode: str = "distribution"
    validation_subject_count: int | None = None
    max_attack_samples: int = 100
    objective: str = "f1"
    test_size: int = 10_000
    seed: int = 0
    custom: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.validate()

    def validate(self) -> None:
        if not self.custom:
            for name, allowed in GRID_DOMAINS.items():
                if getattr(self, name) not in allowed:
                    raise ConfigError(f"{name}={getattr(self, name)!r} outside {allowed}; set custom: true")
            if not ROUNDS_RANGE[0] <= self.rounds <= ROUNDS_RANGE[1]:
                raise ConfigError(f"rounds={self.rounds} outside {ROUNDS_RANGE}; set custom: true")
        if self.sampling not in GRID_DOMAINS["sampling"]:
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        if self.access_mode not in ("distribution", "item"):
            raise ConfigError(f"unknown access_mode {self.access_mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.objective not in ("f1", "accuracy"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        positive = ("d", "users", "subjects_per_user", "items_per_user", "local_epochs",
                    "batch_size", "max_attack_samples", "test_size")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.rounds < 0:
            raise ConfigError("rounds must be non-negative")
        if len(self.hidden) > 8 or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden must list at most 8 positive widths")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation must lie in (0, 1]")
        if self.validation_subject_count is not None and self.validation_subject_count < 1:
            raise ConfigError("validation_subject_count must be at least 1")
        if self.items_per_user < self.subjects_per_user:
            raise ConfigError("items_per_user must cover every assigned subject")

    def replace(self, **changes) -> "FederationConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out: dict = {}
        for section, names in SECTIONS.items():
            out[section] = {n: _plain(getattr(self, n)) for n in names}
        out["dp"] = None if self.dp is None else _plain(self.dp.to_dict())
        out["seed"] = self.seed
        out["custom"] = self.custom
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FederationConfig":
        data = dict(data or {})
        kwargs: dict = {}
        for key, value in data.items():
            if key in SECTIONS:
                value = value or {}
                unknown = set(value) - set(SECTIONS[key])
                if unknown:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
                kwargs.update(value)
            elif key == "dp":
                if value is not None:
                    unknown = set(value) - {f.name for f in dataclasses.fields(DpConfig)}
                    if unknown:
                        raise ConfigError(f"unknown keys in [dp]: {sorted(unknown)}")
                    value = dict(value)
                    if "clip_threshold" in value:
                        value["clip_threshold"] = float(value["clip_threshold"])
                    kwargs["dp"] = DpConfig(**value)
            elif key in TOP_LEVEL:
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown top-level key {key!r}")
        if "hidden" in kwargs:
            kwargs["hidden"] = tuple(kwargs["hidden"])
        return cls(**kwargs)

    def canonical(self, include_seed: bool = True) -> str:
        d = self.to_dict()
        if not include_seed:
            d.pop("seed")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def derive_seed(master_seed: int, cfg: FederationConfig) -> int:
    """Per-config seed from a master seed and the config's canonical encoding."""
    h = hashlib.sha256(f"{master_seed}:{cfg.canonical(include_seed=False)}".encode())
    return int.from_bytes(h.digest()[:8], "big")


def load_config(path) -> FederationConfig:
    with open(Path(path)) as fh:
        return FederationConfig.from_dict(yaml.safe_load(fh))


def dump_config(cfg: FederationConfig, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    return path

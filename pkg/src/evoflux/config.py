"""Experiment configuration: TOML file in, validated config out.

Sections: [run], [staleness], [task], [backend], [stages.<name>],
[control]. Unknown keys are rejected rather than ignored, and the resolved
configuration is echoed verbatim into every report for reproducibility.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields as dc_fields
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

VALID_MODES = ("sync", "async")
VALID_POLICIES = ("full", "guarded", "reflective")
VALID_REFLECTORS = ("mock", "llm")
VALID_BACKENDS = ("sim", "http")
VALID_DISTS = ("lognormal", "pareto", "fixed")


@dataclass
class StageConfig:
    k_init: int = 1
    k_min: int = 1
    k_max: int = 8
    alpha_spec: float = 1.0
    speculative_insert: bool = True  # evaluate stage only

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _default_stages() -> dict[str, "StageConfig"]:
    return {
        "generate": StageConfig(),
        "propose": StageConfig(),
        "evaluate": StageConfig(),
        "reflect": StageConfig(),
    }


@dataclass
class ExperimentConfig:
    # [run]
    mode: str = "async"
    seed: int = 42
    budget_s: Optional[float] = 300.0
    budget_updates: Optional[int] = None
    barrier: bool = False
    queue_capacity: Optional[int] = None
    speculative_selectable: bool = False
    # [staleness]
    policy: str = "full"
    delta_max: int = 4
    reflector: str = "mock"
    # [task]
    n_features: int = 16
    n_train_samples: int = 12
    n_val_samples: int = 20
    mb: int = 3
    mutation_rate: float = 0.3
    value_range: int = 8
    pass_fraction: float = 0.5
    sample_noise: int = 6
    initial_noise: int = 10
    perturbation: bool = True
    weight_scheme: str = "uniform"
    # [backend]
    backend_kind: str = "sim"
    capacity: int = 8
    token_rate: float = 50.0
    overhead_s: float = 0.0
    length_dist: str = "lognormal"
    median_tokens: float = 100.0
    sigma: float = 0.99
    fixed_n: int = 128
    pareto_scale: float = 50.0
    pareto_shape: float = 1.5
    base_url: str = ""
    model: str = ""
    temperature: float = 0.7
    timeout_s: float = 120.0
    connection_limit: int = 8
    # [stages.*]
    stages: dict[str, StageConfig] = field(default_factory=_default_stages)
    # [control]
    adaptive: bool = False
    control_period_s: float = 10.0
    rate_window_s: float = 30.0
    reorder_validation: bool = False
    demotion_streak: int = 3

    def validate(self) -> "ExperimentConfig":
        if self.mode not in VALID_MODES:
            raise ConfigError(f"run.mode must be one of {VALID_MODES}, got {self.mode!r}")
        if self.policy not in VALID_POLICIES:
            raise ConfigError(
                f"staleness.policy must be one of {VALID_POLICIES}, got {self.policy!r}"
            )
        if self.reflector not in VALID_REFLECTORS:
            raise ConfigError(
                f"staleness.reflector must be one of {VALID_REFLECTORS}, got {self.reflector!r}"
            )
        if self.backend_kind not in VALID_BACKENDS:
            raise ConfigError(f"backend.kind must be one of {VALID_BACKENDS}")
        if self.length_dist not in VALID_DISTS:
            raise ConfigError(f"backend.length_dist must be one of {VALID_DISTS}")
        if self.budget_s is None and self.budget_updates is None:
            raise ConfigError("run needs budget_s or budget_updates")
        if self.delta_max < 0:
            raise ConfigError("staleness.delta_max must be >= 0")
        if self.backend_kind == "http" and not self.base_url:
            raise ConfigError("backend.kind=http requires backend.base_url")
        for name, stage in self.stages.items():
            if not (1 <= stage.k_min <= stage.k_init <= stage.k_max):
                raise ConfigError(f"stages.{name}: need k_min <= k_init <= k_max")
            if not 0 < stage.alpha_spec <= 1:
                raise ConfigError(f"stages.{name}: alpha_spec must be in (0, 1]")
        return self

    def to_dict(self) -> dict:
        return {
            "run": {
                "mode": self.mode,
                "seed": self.seed,
                "budget_s": self.budget_s,
                "budget_updates": self.budget_updates,
                "barrier": self.barrier,
                "queue_capacity": self.queue_capacity,
                "speculative_selectable": self.speculative_selectable,
            },
            "staleness": {
                "policy": self.policy,
                "delta_max": self.delta_max,
                "reflector": self.reflector,
            },
            "task": {
                "n_features": self.n_features,
                "n_train_samples": self.n_train_samples,
                "n_val_samples": self.n_val_samples,
                "mb": self.mb,
                "mutation_rate": self.mutation_rate,
                "value_range": self.value_range,
                "pass_fraction": self.pass_fraction,
                "sample_noise": self.sample_noise,
                "initial_noise": self.initial_noise,
                "perturbation": self.perturbation,
                "weight_scheme": self.weight_scheme,
            },
            "backend": {
                "kind": self.backend_kind,
                "capacity": self.capacity,
                "token_rate": self.token_rate,
                "overhead_s": self.overhead_s,
                "length_dist": self.length_dist,
                "median_tokens": self.median_tokens,
                "sigma": self.sigma,
                "fixed_n": self.fixed_n,
                "pareto_scale": self.pareto_scale,
                "pareto_shape": self.pareto_shape,
                "base_url": self.base_url,
                "model": self.model,
                "temperature": self.temperature,
                "timeout_s": self.timeout_s,
                "connection_limit": self.connection_limit,
            },
            "stages": {name: s.to_dict() for name, s in sorted(self.stages.items())},
            "control": {
                "adaptive": self.adaptive,
                "control_period_s": self.control_period_s,
                "rate_window_s": self.rate_window_s,
                "reorder_validation": self.reorder_validation,
                "demotion_streak": self.demotion_streak,
            },
        }


_SECTION_KEYS = {
    "run": {
        "mode": "mode", "seed": "seed", "budget_s": "budget_s",
        "budget_updates": "budget_updates", "barrier": "barrier",
        "queue_capacity": "queue_capacity",
        "speculative_selectable": "speculative_selectable",
    },
    "staleness": {"policy": "policy", "delta_max": "delta_max", "reflector": "reflector"},
    "task": {
        "n_features": "n_features", "n_train_samples": "n_train_samples",
        "n_val_samples": "n_val_samples", "mb": "mb",
        "mutation_rate": "mutation_rate", "value_range": "value_range",
        "pass_fraction": "pass_fraction", "sample_noise": "sample_noise",
        "initial_noise": "initial_noise", "perturbation": "perturbation",
        "weight_scheme": "weight_scheme",
    },
    "backend": {
        "kind": "backend_kind", "capacity": "capacity", "token_rate": "token_rate",
        "overhead_s": "overhead_s", "length_dist": "length_dist",
        "median_tokens": "median_tokens", "sigma": "sigma", "fixed_n": "fixed_n",
        "pareto_scale": "pareto_scale", "pareto_shape": "pareto_shape",
        "base_url": "base_url", "model": "model", "temperature": "temperature",
        "timeout_s": "timeout_s", "connection_limit": "connection_limit",
    },
    "control": {
        "adaptive": "adaptive", "control_period_s": "control_period_s",
        "rate_window_s": "rate_window_s", "reorder_validation": "reorder_validation",
        "demotion_streak": "demotion_streak",
    },
}

_STAGE_KEYS = {f.name for f in dc_fields(StageConfig)}


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    unknown_sections = set(data) - set(_SECTION_KEYS) - {"stages"}
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    for section, keys in _SECTION_KEYS.items():
        body = data.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section [{section}] must be a table")
        unknown = set(body) - set(keys)
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
        for key, attr in keys.items():
            if key in body:
                setattr(cfg, attr, body[key])
    for name, body in data.get("stages", {}).items():
        if name not in cfg.stages:
            raise ConfigError(f"unknown stage {name!r} in [stages]")
        unknown = set(body) - _STAGE_KEYS
        if unknown:
            raise ConfigError(f"unknown keys in [stages.{name}]: {sorted(unknown)}")
        for key, value in body.items():
            setattr(cfg.stages[name], key, value)
    return cfg.validate()


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)

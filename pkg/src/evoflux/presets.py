"""Canned experiment configurations.

W1 is the reference workload used throughout the test suite: a 16-feature
task, 20 validation samples, minibatch 3, a capacity-8 backend with the
heavy-tail length preset, seed 42.
"""

from __future__ import annotations

from .config import ExperimentConfig, StageConfig


def w1(
    mode: str = "async",
    *,
    seed: int = 42,
    budget_s: float = 240.0,
    policy: str = "full",
    delta_max: int = 4,
    adaptive: bool = False,
    barrier: bool = False,
) -> ExperimentConfig:
    cfg = ExperimentConfig(
        mode=mode,
        seed=seed,
        budget_s=budget_s,
        barrier=barrier,
        policy=policy,
        delta_max=delta_max,
        n_features=16,
        n_train_samples=12,
        n_val_samples=20,
        mb=3,
        mutation_rate=0.3,
        backend_kind="sim",
        capacity=8,
        token_rate=50.0,
        length_dist="lognormal",
        median_tokens=100.0,
        sigma=0.99,
        adaptive=adaptive,
    )
    cfg.stages["generate"] = StageConfig(k_init=2, k_min=1, k_max=8)
    cfg.stages["propose"] = StageConfig(k_init=2, k_min=1, k_max=8)
    cfg.stages["evaluate"] = StageConfig(k_init=3, k_min=1, k_max=8)
    cfg.stages["reflect"] = StageConfig(k_init=1, k_min=1, k_max=4)
    return cfg.validate()


def w1_barrier(seed: int = 42, budget_s: float = 240.0) -> ExperimentConfig:
    """Async engine constrained to serial execution: K_i=1, alpha_spec=1,
    barrier on. Must replay the serial reference loop exactly."""
    cfg = w1("async", seed=seed, budget_s=budget_s, barrier=True)
    for stage in cfg.stages.values():
        stage.k_init = 1
        stage.alpha_spec = 1.0
    return cfg.validate()


def w1_speculative(
    seed: int = 42,
    budget_s: float = 240.0,
    alpha_evaluate: float = 0.25,
    alpha_generate: float = 1.0,
) -> ExperimentConfig:
    cfg = w1("async", seed=seed, budget_s=budget_s)
    cfg.stages["evaluate"].alpha_spec = alpha_evaluate
    cfg.stages["generate"].alpha_spec = alpha_generate
    cfg.reorder_validation = True
    return cfg.validate()

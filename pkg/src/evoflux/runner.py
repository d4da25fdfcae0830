"""Builds and runs experiments from a validated configuration.

One seed drives everything: task content, backend length sampling, and
proposal randomness, so a (config, seed) pair fully determines a
simulation run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

from .backend import (
    HttpBackend,
    HttpBackendConfig,
    LengthDist,
    SimBackend,
    SimBackendConfig,
)
from .config import ExperimentConfig
from .errors import ConfigError
from .metrics import RunReport, TraceRecorder
from .pipeline.engine import Budget, ControlConfig, Engine, PipelineWorkload
from .pipeline.topology import loop_topology
from .pool import ArtifactPool
from .sim import EventLoop, WallClock
from .staleness import LlmReflector, MockReflector, PolicyKind, StalenessPolicy
from .workload import (
    EvaluateHandler,
    GenerateHandler,
    ProposeHandler,
    SyntheticTask,
    TaskConfig,
    TaskRuntime,
    run_sync_reference,
    seed_pool,
)


@dataclass
class ExperimentResult:
    report: RunReport
    trace: TraceRecorder
    engine: Optional[Engine] = None
    pool: Optional[ArtifactPool] = None


def build_task(cfg: ExperimentConfig) -> SyntheticTask:
    return SyntheticTask.build(
        TaskConfig(
            n_features=cfg.n_features,
            n_train_samples=cfg.n_train_samples,
            n_val_samples=cfg.n_val_samples,
            mb=cfg.mb,
            mutation_rate=cfg.mutation_rate,
            rng_seed=cfg.seed,
            value_range=cfg.value_range,
            pass_fraction=cfg.pass_fraction,
            sample_noise=cfg.sample_noise,
            initial_noise=cfg.initial_noise,
            perturbation=cfg.perturbation,
            weight_scheme=cfg.weight_scheme,
        )
    )


def build_length_dist(cfg: ExperimentConfig) -> LengthDist:
    import math

    if cfg.length_dist == "lognormal":
        return LengthDist("lognormal", mu=math.log(cfg.median_tokens), sigma=cfg.sigma)
    if cfg.length_dist == "pareto":
        return LengthDist("pareto", scale=cfg.pareto_scale, shape=cfg.pareto_shape)
    return LengthDist("fixed", n=cfg.fixed_n)


def build_backend(cfg: ExperimentConfig, loop: Optional[EventLoop], clock: Any = None):
    if cfg.backend_kind == "sim":
        if loop is None:
            raise ConfigError("simulated backend needs an event loop")
        return SimBackend(
            SimBackendConfig(
                capacity=cfg.capacity,
                token_rate=cfg.token_rate,
                length_dist=build_length_dist(cfg),
                rng_seed=cfg.seed,
                overhead_s=cfg.overhead_s,
            ),
            loop,
        )
    return HttpBackend(
        HttpBackendConfig(
            base_url=cfg.base_url,
            model=cfg.model,
            temperature=cfg.temperature,
            timeout_s=cfg.timeout_s,
            connection_limit=cfg.connection_limit,
        ),
        clock=clock,
    )


def build_budget(cfg: ExperimentConfig) -> Budget:
    return Budget(max_time=cfg.budget_s, max_updates=cfg.budget_updates)


def build_policy(cfg: ExperimentConfig) -> StalenessPolicy:
    if cfg.policy == "full":
        return StalenessPolicy.full()
    if cfg.policy == "guarded":
        return StalenessPolicy.guarded(cfg.delta_max)
    return StalenessPolicy.reflective(cfg.reflector)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    cfg.validate()
    task = build_task(cfg)
    echo = cfg.to_dict()
    trace = TraceRecorder()

    if cfg.mode == "sync":
        loop = EventLoop()
        backend = build_backend(cfg, loop)
        pool = ArtifactPool()
        report = run_sync_reference(
            task, backend, build_budget(cfg),
            run_seed=cfg.seed, trace=trace, pool=pool, config_echo=echo,
        )
        return ExperimentResult(report, trace, pool=pool)

    wall = cfg.backend_kind == "http"
    clock: Any = WallClock() if wall else EventLoop()
    backend = build_backend(cfg, None if wall else clock, clock=clock)
    pool = ArtifactPool(speculative_selectable=cfg.speculative_selectable)
    policy = build_policy(cfg)
    topology = loop_topology(
        pool, policy,
        mb=cfg.mb,
        n_val=cfg.n_val_samples,
        k_generate=cfg.stages["generate"].k_init,
        k_propose=cfg.stages["propose"].k_init,
        k_evaluate=cfg.stages["evaluate"].k_init,
        k_reflect=cfg.stages["reflect"].k_init,
        alpha_generate=cfg.stages["generate"].alpha_spec,
        alpha_evaluate=cfg.stages["evaluate"].alpha_spec,
        queue_capacity=cfg.queue_capacity,
    )
    for spec in topology.stages:
        stage_cfg = cfg.stages[spec.name]
        spec.k_min, spec.k_max = stage_cfg.k_min, stage_cfg.k_max

    eval_alpha = cfg.stages["evaluate"].alpha_spec
    runtime = TaskRuntime(
        task, cfg.seed,
        reorder_enabled=cfg.reorder_validation,
        reorder_alpha=eval_alpha,
        demotion_streak=cfg.demotion_streak,
    )
    handlers = {
        "generate": GenerateHandler(),
        "propose": ProposeHandler(),
        "evaluate": EvaluateHandler(
            speculative_insert=cfg.stages["evaluate"].speculative_insert
        ),
    }
    workload = PipelineWorkload(handlers, runtime, cfg.seed)
    engine = Engine(
        topology, workload, backend, clock, build_budget(cfg),
        trace=trace,
        barrier=cfg.barrier,
        reflectors={"mock": MockReflector(), "llm": LlmReflector()},
        control=ControlConfig(
            adaptive=cfg.adaptive,
            period_s=cfg.control_period_s,
            window_s=cfg.rate_window_s,
        ),
    )
    seed_pool(pool, task, runtime)
    engine.run()
    if hasattr(backend, "close"):
        backend.close()
    report = engine.report(config_echo=echo, seed=cfg.seed)
    return ExperimentResult(report, trace, engine=engine, pool=pool)

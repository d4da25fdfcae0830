"""Builders for small, fast engine runs used across the pipeline tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from evoflux.backend import LengthDist, SimBackend, SimBackendConfig
from evoflux.metrics import TraceRecorder
from evoflux.pipeline.engine import Budget, ControlConfig, Engine, PipelineWorkload
from evoflux.pipeline.topology import loop_topology
from evoflux.pool import ArtifactPool
from evoflux.sim import EventLoop
from evoflux.staleness import LlmReflector, MockReflector, StalenessPolicy
from evoflux.workload import (
    EvaluateHandler,
    GenerateHandler,
    ProposeHandler,
    SyntheticTask,
    TaskConfig,
    TaskRuntime,
    seed_pool,
)


@dataclass
class Rig:
    engine: Engine
    pool: ArtifactPool
    loop: EventLoop
    backend: SimBackend
    task: SyntheticTask
    runtime: TaskRuntime
    trace: TraceRecorder

    def run(self):
        self.engine.run()
        return self.engine.report()

    def events(self, kind: Optional[str] = None) -> list[dict]:
        if kind is None:
            return self.trace.events
        return [e for e in self.trace.events if e["kind"] == kind]


def small_rig(
    *,
    policy: Optional[StalenessPolicy] = None,
    seed: int = 7,
    budget_s: Optional[float] = 60.0,
    budget_updates: Optional[int] = None,
    barrier: bool = False,
    k_generate: int = 2,
    k_propose: int = 1,
    k_evaluate: int = 1,
    k_reflect: int = 1,
    k_max: int = 8,
    alpha_generate: float = 1.0,
    alpha_evaluate: float = 1.0,
    mb: int = 2,
    n_val: int = 4,
    capacity: int = 4,
    fixed_tokens: Optional[int] = 100,
    queue_capacity: Optional[int] = None,
    speculative_selectable: bool = False,
    speculative_insert: bool = True,
    handlers: Optional[dict] = None,
    control: Optional[ControlConfig] = None,
    task_overrides: Optional[dict] = None,
    seed_the_pool: bool = True,
    engine_cls=Engine,
) -> Rig:
    params = dict(
        n_features=6, n_train_samples=4, n_val_samples=n_val, mb=mb,
        mutation_rate=0.5, rng_seed=seed, value_range=4, pass_fraction=0.5,
        sample_noise=1, initial_noise=4, perturbation=True,
    )
    params.update(task_overrides or {})
    task = SyntheticTask.build(TaskConfig(**params))
    loop = EventLoop()
    dist = (
        LengthDist("fixed", n=fixed_tokens)
        if fixed_tokens is not None
        else LengthDist("lognormal", mu=4.6, sigma=0.99)
    )
    backend = SimBackend(
        SimBackendConfig(capacity=capacity, token_rate=100.0, length_dist=dist, rng_seed=seed),
        loop,
    )
    pool = ArtifactPool(speculative_selectable=speculative_selectable)
    policy = policy or StalenessPolicy.full()
    topology = loop_topology(
        pool, policy, mb=mb, n_val=n_val,
        k_generate=k_generate, k_propose=k_propose, k_evaluate=k_evaluate,
        k_reflect=k_reflect, k_max=k_max,
        alpha_generate=alpha_generate, alpha_evaluate=alpha_evaluate,
        queue_capacity=queue_capacity,
    )
    runtime = TaskRuntime(task, seed, reorder_alpha=alpha_evaluate)
    workload = PipelineWorkload(
        handlers
        or {
            "generate": GenerateHandler(),
            "propose": ProposeHandler(),
            "evaluate": EvaluateHandler(speculative_insert=speculative_insert),
        },
        runtime,
        seed,
    )
    trace = TraceRecorder()
    engine = engine_cls(
        topology, workload, backend, loop,
        Budget(max_time=budget_s, max_updates=budget_updates),
        trace=trace, barrier=barrier,
        reflectors={"mock": MockReflector(), "llm": LlmReflector()},
        control=control,
    )
    if seed_the_pool:
        seed_pool(pool, task, runtime)
    return Rig(engine, pool, loop, backend, task, runtime, trace)

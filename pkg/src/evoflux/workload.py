"""Synthetic evolution task plus the serial reference loop.

The task evolves a structured genome (a fixed feature set with small
integer values) toward per-sample targets. Scoring is a pure function of
(fields, sample), so the backend contributes latency and token counts
only; systems speedup is measured without entangling it with artifact
quality. The serial loop here is the oracle the asynchronous engine is
checked against and the baseline speedups are measured from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np

from ._util import canonical_json, ceil_fraction, rng_for
from .backend.base import BackendRequest, BackendResponse
from .control import ValidationTracker, reorder_validation
from .errors import ConfigError
from .pool import Artifact, ArtifactKind, ArtifactPool, EntryStatus
from .speculation import PartialScore
from .staleness import encode_field_diff
from .pipeline.handlers import (
    EvalResult,
    HandlerContext,
    Outputs,
    PartialEval,
    PreparedWork,
    StageHandler,
    StageOutput,
)
from .pipeline.topology import EVALUATE, GENERATE, PROPOSE

DEFAULT_MAX_OUTPUT_TOKENS = 2048


@dataclass(frozen=True)
class TaskSample:
    sample_id: str
    target: dict[str, int]
    weight: float


@dataclass(frozen=True)
class TaskConfig:
    n_features: int = 16
    n_train_samples: int = 12
    n_val_samples: int = 20
    mb: int = 3  # rollout minibatch size
    mutation_rate: float = 0.3
    rng_seed: int = 42
    value_range: int = 8
    pass_fraction: float = 0.5  # feature-match fraction for a sample to pass
    sample_noise: int = 6  # per-sample deviation from the shared base, spread 0..this
    initial_noise: int = 10  # distance of the seed artifact from the base genome
    perturbation: bool = True  # one random tweak per proposal; off = noise-free
    weight_scheme: str = "uniform"  # uniform | geometric

    def __post_init__(self) -> None:
        if self.mb > self.n_train_samples:
            raise ConfigError("mb must not exceed n_train_samples")
        if self.sample_noise > self.n_features:
            raise ConfigError("sample_noise must not exceed n_features")
        if self.initial_noise > self.n_features:
            raise ConfigError("initial_noise must not exceed n_features")
        if self.weight_scheme not in ("uniform", "geometric"):
            raise ConfigError(f"unknown weight scheme {self.weight_scheme!r}")

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "n_train_samples": self.n_train_samples,
            "n_val_samples": self.n_val_samples,
            "mb": self.mb,
            "mutation_rate": self.mutation_rate,
            "rng_seed": self.rng_seed,
            "value_range": self.value_range,
            "pass_fraction": self.pass_fraction,
            "sample_noise": self.sample_noise,
            "initial_noise": self.initial_noise,
            "perturbation": self.perturbation,
            "weight_scheme": self.weight_scheme,
        }


@dataclass(frozen=True)
class SyntheticTask:
    config: TaskConfig
    features: tuple[str, ...]
    train_samples: tuple[TaskSample, ...]
    val_samples: tuple[TaskSample, ...]
    initial_fields: dict[str, int]

    @classmethod
    def build(cls, config: TaskConfig) -> "SyntheticTask":
        """All sample targets share one base genome with per-sample noise.

        Corrections learned from training samples therefore transfer to the
        validation set. Noise levels are spread over 0..sample_noise across
        samples, so samples pass at different artifact qualities and the
        score climbs in many increments instead of one jump.
        """
        features = tuple(f"f{i:02d}" for i in range(config.n_features))
        rng = rng_for(config.rng_seed, "task")
        base = {
            f: int(v) for f, v in zip(features, rng.integers(0, config.value_range, len(features)))
        }

        def draw_target(noise: int) -> dict[str, int]:
            target = dict(base)
            if noise:
                noisy = rng.choice(len(features), size=noise, replace=False)
                for idx in sorted(int(i) for i in noisy):
                    target[features[idx]] = int(rng.integers(0, config.value_range))
            return target

        levels = config.sample_noise + 1
        train = tuple(
            TaskSample(f"train{i:02d}", draw_target(i % levels), 0.0)
            for i in range(config.n_train_samples)
        )
        n = config.n_val_samples
        if config.weight_scheme == "uniform":
            raw = [1.0] * n
        else:
            raw = [0.8**i for i in range(n)]
        total = sum(raw)
        val = tuple(
            TaskSample(f"val{i:02d}", draw_target(i % levels), raw[i] / total)
            for i in range(n)
        )
        initial = draw_target(config.initial_noise)
        return cls(config, features, train, val, initial)

    def val_sample(self, sample_id: str) -> TaskSample:
        return self._val_index()[sample_id]

    def _val_index(self) -> dict[str, TaskSample]:
        return {s.sample_id: s for s in self.val_samples}


# -- pure scoring --------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Execution feedback for one sample: which features matched, and the
    observed target for each failing one."""

    sample_id: str
    failures: dict[str, int]
    matched: tuple[str, ...]

    def to_trace(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "failures": dict(sorted(self.failures.items())),
            "matched": sorted(self.matched),
        }


def run_trajectory(fields: dict[str, int], sample: TaskSample) -> Trajectory:
    failures = {f: t for f, t in sample.target.items() if fields.get(f) != t}
    matched = tuple(sorted(f for f in sample.target if f not in failures))
    return Trajectory(sample.sample_id, dict(sorted(failures.items())), matched)


def sample_passes(fields: dict[str, int], sample: TaskSample, pass_fraction: float) -> bool:
    need = ceil_fraction(pass_fraction, len(sample.target))
    matches = sum(1 for f, t in sample.target.items() if fields.get(f) == t)
    return matches >= need


def score_fields(task: SyntheticTask, fields: dict[str, int]) -> float:
    """Weighted pass rate over the full validation set, in task order."""
    return sum(
        s.weight
        for s in task.val_samples
        if sample_passes(fields, s, task.config.pass_fraction)
    )


def implied_corrections(trajectories: list[Trajectory]) -> list[tuple[str, int]]:
    """Failing features with observed targets; first observation wins."""
    seen: dict[str, int] = {}
    for traj in trajectories:
        for feature, target in sorted(traj.failures.items()):
            seen.setdefault(feature, target)
    return list(seen.items())


def propose_fields(
    task: SyntheticTask,
    parent_fields: dict[str, int],
    trajectories: list[Trajectory],
    rng: np.random.Generator,
    allowed_edits: Optional[dict[str, int]] = None,
) -> dict[str, int]:
    """Correct failing features toward observed targets (each with
    probability mutation_rate), then apply one random perturbation."""
    cfg = task.config
    fields = dict(parent_fields)
    for feature, target in implied_corrections(trajectories):
        if allowed_edits is not None and feature not in allowed_edits:
            continue
        if rng.random() < cfg.mutation_rate:
            fields[feature] = target
    if cfg.perturbation:
        feature = task.features[int(rng.integers(0, len(task.features)))]
        fields[feature] = int(rng.integers(0, cfg.value_range))
    return fields


# -- payloads flowing between stages -------------------------------------------


@dataclass(frozen=True)
class ArtifactView:
    artifact_id: str
    fields: dict[str, int]
    parent_id: Optional[str] = None

    def to_trace(self) -> dict:
        return {
            "artifact_id": self.artifact_id,
            "fields": dict(sorted(self.fields.items())),
            "parent_id": self.parent_id,
        }


@dataclass(frozen=True)
class TrajectoryBatch:
    """generate -> propose payload. Its edit view is the correction set the
    trajectories imply, which is what a reflector can sensibly rebase."""

    parent: ArtifactView
    trajectories: tuple[Trajectory, ...]
    minibatch_ids: tuple[str, ...]
    allowed_edits: Optional[dict[str, int]] = None

    @property
    def edits(self) -> dict[str, int]:
        if self.allowed_edits is not None:
            return dict(self.allowed_edits)
        return dict(implied_corrections(list(self.trajectories)))

    def with_edits(self, surviving: dict[str, int], updates: list) -> "TrajectoryBatch":
        return replace(self, allowed_edits=dict(surviving))

    def to_trace(self) -> dict:
        return {
            "kind": "trajectories",
            "parent": self.parent.to_trace(),
            "trajectories": [t.to_trace() for t in self.trajectories],
            "minibatch": list(self.minibatch_ids),
            "allowed_edits": self.allowed_edits,
        }


@dataclass(frozen=True)
class CandidateProposal:
    """propose -> evaluate payload. Its edit view is the candidate's diff
    against its parent; patching rebases onto the parent plus the durable
    intervening diffs and keeps only the surviving edits."""

    candidate: ArtifactView
    parent_fields: dict[str, int]

    @property
    def edits(self) -> dict[str, int]:
        return {
            f: v for f, v in self.candidate.fields.items() if self.parent_fields.get(f) != v
        }

    def with_edits(self, surviving: dict[str, int], updates: list) -> "CandidateProposal":
        from .staleness import decode_field_diff
        from .pool import UpdateOp

        base = dict(self.parent_fields)
        for update in updates:
            if update.op in (UpdateOp.INSERT_CONFIRMED, UpdateOp.CONFIRM):
                diff = decode_field_diff(update.summary)
                if diff:
                    base.update(diff)
        patched = dict(base)
        patched.update(surviving)
        return CandidateProposal(
            candidate=replace(self.candidate, fields=patched), parent_fields=base
        )

    def to_trace(self) -> dict:
        return {
            "kind": "candidate",
            "candidate": self.candidate.to_trace(),
            "parent_fields": dict(sorted(self.parent_fields.items())),
        }


# -- runtime shared by the engine and the serial reference ---------------------


class TaskRuntime:
    """Mutable per-run state: id allocation, minibatch cursor, validation
    order, and pass-streak tracking."""

    def __init__(
        self,
        task: SyntheticTask,
        run_seed: int,
        *,
        reorder_enabled: bool = False,
        reorder_alpha: float = 1.0,
        demotion_streak: int = 3,
    ) -> None:
        self.task = task
        self.run_seed = run_seed
        self.reorder_enabled = reorder_enabled
        self.reorder_alpha = reorder_alpha
        self._request_n = 0
        self._artifact_n = 0
        self._cursor = 0
        self.validation_order = [s.sample_id for s in task.val_samples]
        self.tracker = ValidationTracker(self.validation_order, w=demotion_streak)

    def next_request_id(self) -> str:
        rid = f"r{self._request_n}"
        self._request_n += 1
        return rid

    def next_artifact_id(self) -> str:
        aid = f"a{self._artifact_n}"
        self._artifact_n += 1
        return aid

    def next_minibatch(self) -> list[TaskSample]:
        """Round-robin over the training samples."""
        samples = []
        train = self.task.train_samples
        for _ in range(self.task.config.mb):
            samples.append(train[self._cursor % len(train)])
            self._cursor += 1
        return samples

    def record_eval(self, per_sample: list[tuple[str, bool]]) -> None:
        for sample_id, passed in per_sample:
            self.tracker.record(sample_id, passed)
        if self.reorder_enabled:
            self.validation_order = reorder_validation(
                self.tracker, self.validation_order, self.reorder_alpha
            )


def _prompt_request(
    runtime: TaskRuntime, stage: str, purpose: str, content: dict
) -> BackendRequest:
    text = canonical_json({"purpose": purpose, **content})
    return BackendRequest(
        request_id=runtime.next_request_id(),
        stage=stage,
        prompt_tokens=max(1, len(text) // 4),
        max_output_tokens=DEFAULT_MAX_OUTPUT_TOKENS,
        seed_material=text.encode("utf-8"),
        messages=[{"role": "user", "content": text}],
    )


def build_generate_requests(
    runtime: TaskRuntime, parent: ArtifactView, minibatch: list[TaskSample]
) -> list[BackendRequest]:
    return [
        _prompt_request(
            runtime,
            GENERATE,
            "rollout",
            {"artifact": parent.to_trace(), "sample": s.sample_id},
        )
        for s in minibatch
    ]


def build_propose_request(
    runtime: TaskRuntime, batch: TrajectoryBatch
) -> BackendRequest:
    return _prompt_request(
        runtime, PROPOSE, "reflection", {"batch": batch.to_trace()}
    )


def build_evaluate_requests(
    runtime: TaskRuntime, candidate: ArtifactView, order: list[str]
) -> list[BackendRequest]:
    return [
        _prompt_request(
            runtime,
            EVALUATE,
            "validation",
            {"artifact": candidate.to_trace(), "sample": sid},
        )
        for sid in order
    ]


def propose_rng(runtime: TaskRuntime, batch: TrajectoryBatch) -> np.random.Generator:
    """Proposal randomness keyed by content, not call order."""
    return rng_for(
        runtime.run_seed,
        "propose",
        batch.parent.to_trace(),
        [t.to_trace() for t in batch.trajectories],
        batch.allowed_edits,
    )


def make_candidate(runtime: TaskRuntime, batch: TrajectoryBatch) -> CandidateProposal:
    fields = propose_fields(
        runtime.task,
        batch.parent.fields,
        list(batch.trajectories),
        propose_rng(runtime, batch),
        allowed_edits=batch.allowed_edits,
    )
    view = ArtifactView(runtime.next_artifact_id(), fields, parent_id=batch.parent.artifact_id)
    return CandidateProposal(candidate=view, parent_fields=dict(batch.parent.fields))


def candidate_artifact(proposal: CandidateProposal, pool_version: int) -> Artifact:
    return Artifact(
        artifact_id=proposal.candidate.artifact_id,
        payload=dict(sorted(proposal.candidate.fields.items())),
        kind=ArtifactKind.SYNTHETIC,
        parent_id=proposal.candidate.parent_id,
        created_at_version=pool_version,
    )


def seed_pool(pool: ArtifactPool, task: SyntheticTask, runtime: TaskRuntime) -> Artifact:
    """Insert the initial artifact, scored for free at t=0."""
    fields = dict(task.initial_fields)
    artifact = Artifact(
        artifact_id=runtime.next_artifact_id(),
        payload=dict(sorted(fields.items())),
        kind=ArtifactKind.SYNTHETIC,
        parent_id=None,
        created_at_version=0,
    )
    pool.insert_confirmed(artifact, score_fields(task, fields), summary=encode_field_diff(fields))
    return artifact


def artifact_view(artifact: Artifact) -> ArtifactView:
    return ArtifactView(artifact.artifact_id, dict(artifact.payload), artifact.parent_id)


# -- spec-surface handler functions (serial, blocking) --------------------------


def _drain(backend: Any, completions: list) -> list[BackendResponse]:
    if hasattr(backend, "drain"):
        return backend.drain(completions)
    for c in completions:
        c.wait()
    return [c.result for c in completions]


def generate_handler(
    runtime: TaskRuntime, parent: ArtifactView, minibatch: list[TaskSample], backend: Any
) -> list[Trajectory]:
    """One backend request per minibatch sample; trajectories are the
    per-feature execution feedback."""
    requests = build_generate_requests(runtime, parent, minibatch)
    _drain(backend, [backend.submit(r) for r in requests])
    return [run_trajectory(parent.fields, s) for s in minibatch]


def propose_handler(
    runtime: TaskRuntime, batch: TrajectoryBatch, backend: Any
) -> CandidateProposal:
    """One reflection request, then a deterministic content-keyed mutation."""
    _drain(backend, [backend.submit(build_propose_request(runtime, batch))])
    return make_candidate(runtime, batch)


def evaluate_handler(
    runtime: TaskRuntime, proposal: CandidateProposal, backend: Any
) -> tuple[list[tuple[str, bool]], float]:
    """One request per validation sample; returns per-sample passes (in the
    current validation order) and the weighted score."""
    task = runtime.task
    order = list(runtime.validation_order)
    requests = build_evaluate_requests(runtime, proposal.candidate, order)
    _drain(backend, [backend.submit(r) for r in requests])
    per_sample = [
        (sid, sample_passes(proposal.candidate.fields, task.val_sample(sid), task.config.pass_fraction))
        for sid in order
    ]
    return per_sample, score_fields(task, proposal.candidate.fields)


# -- engine-facing stage handlers ----------------------------------------------


class GenerateHandler(StageHandler):
    handler_id = GENERATE

    def prepare(self, ctx: HandlerContext, item: Any) -> PreparedWork:
        runtime: TaskRuntime = ctx.runtime
        parent_artifact = ctx.pool.select_candidate()
        parent = artifact_view(parent_artifact)
        minibatch = runtime.next_minibatch()
        requests = build_generate_requests(runtime, parent, minibatch)
        lineage = frozenset()
        if ctx.pool.entry_status(parent.artifact_id) is EntryStatus.SPECULATIVE:
            lineage = frozenset({parent.artifact_id})
        state = {
            "parent": parent,
            "minibatch": minibatch,
            "by_request": {r.request_id: s for r, s in zip(requests, minibatch)},
            "lineage": lineage,
        }
        return PreparedWork(requests, state)

    def on_release(self, ctx, state, partial_responses):
        runtime: TaskRuntime = ctx.runtime
        parent: ArtifactView = state["parent"]
        completed = [state["by_request"][r.request_id] for r in partial_responses]
        batch = TrajectoryBatch(
            parent=parent,
            trajectories=tuple(run_trajectory(parent.fields, s) for s in completed),
            minibatch_ids=tuple(s.sample_id for s in completed),
        )
        return Outputs([StageOutput(batch, state["lineage"])])

    def on_complete(self, ctx, state, responses, release_count):
        parent: ArtifactView = state["parent"]
        samples: list[TaskSample]
        if release_count:
            # Supplementary item: only the samples that finished after the
            # tentative release.
            samples = [state["by_request"][r.request_id] for r in responses[release_count:]]
            if not samples:
                return Outputs([])
        else:
            samples = state["minibatch"]
        batch = TrajectoryBatch(
            parent=parent,
            trajectories=tuple(run_trajectory(parent.fields, s) for s in samples),
            minibatch_ids=tuple(s.sample_id for s in samples),
        )
        return Outputs([StageOutput(batch, state["lineage"])])


class ProposeHandler(StageHandler):
    handler_id = PROPOSE

    def prepare(self, ctx: HandlerContext, item: Any) -> PreparedWork:
        batch: TrajectoryBatch = item.payload
        return PreparedWork([build_propose_request(ctx.runtime, batch)], {"batch": batch})

    def on_complete(self, ctx, state, responses, release_count):
        proposal = make_candidate(ctx.runtime, state["batch"])
        return Outputs([StageOutput(proposal)])


class EvaluateHandler(StageHandler):
    handler_id = EVALUATE

    def __init__(self, speculative_insert: bool = True) -> None:
        self.speculative_insert = speculative_insert

    def prepare(self, ctx: HandlerContext, item: Any) -> PreparedWork:
        runtime: TaskRuntime = ctx.runtime
        proposal: CandidateProposal = item.payload
        order = list(runtime.validation_order)
        requests = build_evaluate_requests(runtime, proposal.candidate, order)
        state = {
            "proposal": proposal,
            "order": order,
            "by_request": {r.request_id: sid for r, sid in zip(requests, order)},
        }
        return PreparedWork(requests, state)

    def _passes(self, ctx, proposal: CandidateProposal, sample_id: str) -> bool:
        task: SyntheticTask = ctx.runtime.task
        return sample_passes(
            proposal.candidate.fields, task.val_sample(sample_id), task.config.pass_fraction
        )

    def on_release(self, ctx, state, partial_responses):
        if not self.speculative_insert:
            return None
        proposal: CandidateProposal = state["proposal"]
        completed = [state["by_request"][r.request_id] for r in partial_responses]
        passed = sum(1 for sid in completed if self._passes(ctx, proposal, sid))
        partial = PartialScore(passed=passed, evaluated=len(completed))
        return PartialEval(
            partial=partial,
            artifact=candidate_artifact(proposal, ctx.pool.version),
            summary=encode_field_diff(proposal.edits),
        )

    def on_complete(self, ctx, state, responses, release_count):
        proposal: CandidateProposal = state["proposal"]
        per_sample = [
            (sid, self._passes(ctx, proposal, sid)) for sid in state["order"]
        ]
        return EvalResult(
            artifact=candidate_artifact(proposal, ctx.pool.version),
            full_score=score_fields(ctx.runtime.task, proposal.candidate.fields),
            per_sample=per_sample,
            summary=encode_field_diff(proposal.edits),
        )


def default_handlers() -> dict[str, StageHandler]:
    return {
        GENERATE: GenerateHandler(),
        PROPOSE: ProposeHandler(),
        EVALUATE: EvaluateHandler(),
    }


# -- serial reference loop -------------------------------------------------------


def wire_trace(pool: ArtifactPool, backend: Any, trace: Any, clock: Any) -> None:
    """Mirror pool updates and backend activity into an event trace, with
    the same event shapes the pipeline engine emits."""

    def on_update(update) -> None:
        trace.record(
            t=clock.now, kind="pool_update", stage="pool",
            item_id=update.artifact_id, version=update.version,
            detail={
                "op": update.op.value,
                "summary": update.summary,
                "best_score": pool._best_score,  # listener runs inside the pool lock
                "by_item": "",
            },
        )

    pool.listener = on_update
    if hasattr(backend, "on_start"):

        def on_start(request, t: float) -> None:
            trace.record(t=t, kind="backend_start", stage=request.stage,
                         item_id=request.request_id, version=0, detail={})

        def on_end(request, response, t: float) -> None:
            trace.record(
                t=t, kind="backend_end", stage=request.stage,
                item_id=request.request_id, version=0,
                detail={"output_tokens": response.output_tokens, "latency": response.latency},
            )

        backend.on_start = on_start
        backend.on_end = on_end


def run_sync_reference(
    task: SyntheticTask,
    backend: Any,
    budget: Any,
    *,
    run_seed: int = 0,
    trace: Any = None,
    pool: Optional[ArtifactPool] = None,
    config_echo: Optional[dict] = None,
):
    """The strictly serial loop: select, generate, propose, evaluate,
    update, with every stage waiting for all of its backend requests.

    Used as the correctness oracle for the engine's barrier mode and as
    the baseline for speedup measurement. Returns the same report schema
    as the asynchronous engine.
    """
    from .metrics import TraceRecorder, compute_report
    from .sim import WallClock

    clock = getattr(backend, "loop", None) or WallClock()
    trace = trace if trace is not None else TraceRecorder()
    pool = pool if pool is not None else ArtifactPool()
    runtime = TaskRuntime(task, run_seed)
    wire_trace(pool, backend, trace, clock)
    seed_pool(pool, task, runtime)

    item_n = 0
    while not budget.exhausted(clock.now, pool.version):
        parent = artifact_view(pool.select_candidate())
        minibatch = runtime.next_minibatch()

        trajectories = generate_handler(runtime, parent, minibatch, backend)
        batch = TrajectoryBatch(
            parent=parent,
            trajectories=tuple(trajectories),
            minibatch_ids=tuple(s.sample_id for s in minibatch),
        )
        trace.record(
            t=clock.now, kind="push", stage=GENERATE, item_id=f"s{item_n}",
            version=pool.version,
            detail={"to": PROPOSE, "payload": batch.to_trace(),
                    "tentative": False, "routed": False},
        )
        item_n += 1

        proposal = propose_handler(runtime, batch, backend)
        trace.record(
            t=clock.now, kind="push", stage=PROPOSE, item_id=f"s{item_n}",
            version=pool.version,
            detail={"to": EVALUATE, "payload": proposal.to_trace(),
                    "tentative": False, "routed": False},
        )
        item_n += 1

        per_sample, score = evaluate_handler(runtime, proposal, backend)
        inserted = pool.insert_if_improves(
            candidate_artifact(proposal, pool.version), score,
            summary=encode_field_diff(proposal.edits),
        )
        if inserted is None:
            trace.record(
                t=clock.now, kind="discard", stage=EVALUATE, item_id=f"s{item_n}",
                version=pool.version, detail={"reason": "rejected", "score": score},
            )
        item_n += 1
        runtime.record_eval(per_sample)

    horizon = budget.max_time if budget.max_time is not None else clock.now
    return compute_report(trace.events, horizon, config_echo=config_echo, seed=run_seed)

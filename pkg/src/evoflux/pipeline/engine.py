"""The asynchronous evolution-loop engine.

Workers are generator coroutines yielding effects (pop, push, await,
sleep). Two drivers execute them: a discrete-event driver on a virtual
clock, where all concurrency is simulated single-threaded with a
deterministic (time, sequence) event order, and a thread driver for
wall-clock runs. The generate stage is a source: a worker popping from it
receives a fresh tick (bounded by budget and, in barrier mode, by the
pipeline being empty), selects a parent from the pool, and starts a new
evolution step.

Barrier mode serializes the whole loop - a new step starts only when no
item is in flight anywhere - which makes the engine reproduce the serial
reference loop event for event and gives an apples-to-apples speedup
measurement.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional

from ..control import RateWindow, adjust_workers
from ..errors import BoundsError, ConfigError, DuplicateArtifact, GateFailed
from ..metrics import RunReport, TraceRecorder, compute_report
from ..pool import ConfirmOutcome, EntryStatus
from ..sim import Completion, EventLoop
from ..speculation import FanoutTracker, SpecGate, speculative_eval_gate
from ..staleness import (
    FORCED_GAP,
    GateOutcome,
    PolicyKind,
    _apply_patch,
    _edits_view,
    gate,
    version_gap,
)
from .handlers import EvalResult, HandlerContext, Outputs, PartialEval, StageHandler
from .topology import GENERATE, REFLECT, PipelineTopology, QueueItem, StageQueue

# -- effects workers yield ------------------------------------------------------


@dataclass(frozen=True)
class Pop:
    stage: str


@dataclass(frozen=True)
class Push:
    queue: str
    item: QueueItem
    restamp: bool = True  # False keeps the stale stamp (reflective routing)
    routed: bool = False


@dataclass(frozen=True)
class AwaitAny:
    completions: tuple[Completion, ...]


@dataclass(frozen=True)
class Sleep:
    seconds: float


class _Retire:
    def __repr__(self) -> str:
        return "RETIRE"


RETIRE = _Retire()


@dataclass(frozen=True)
class Budget:
    """Stop admitting new work at a virtual/wall time or pool-update count."""

    max_time: Optional[float] = None
    max_updates: Optional[int] = None

    def exhausted(self, now: float, pool_version: int) -> bool:
        if self.max_time is not None and now >= self.max_time:
            return True
        if self.max_updates is not None and pool_version >= self.max_updates:
            return True
        return False


@dataclass
class Counters:
    pops: int = 0
    processed: int = 0
    discarded: int = 0
    rejected: int = 0
    failed: int = 0
    patched: int = 0
    routed: int = 0
    stale_seen: int = 0
    releases: int = 0
    reconciles: int = 0
    speculative_inserts: int = 0
    confirms: int = 0
    rollbacks: int = 0
    force_stale_flagged: int = 0
    source_ticks: int = 0
    wasted_tokens: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class RunMode(str, Enum):
    SYNC = "sync"
    ASYNC = "async"


@dataclass(frozen=True)
class ControlConfig:
    adaptive: bool = False
    period_s: float = 10.0
    window_s: float = 30.0


@dataclass(frozen=True)
class PipelineWorkload:
    """Handlers plus the mutable task runtime they share."""

    handlers: dict[str, StageHandler]
    runtime: Any
    run_seed: int = 0


class StageState:
    def __init__(self, spec, window_s: float) -> None:
        self.spec = spec
        self.desired_k = spec.k_init
        self.active_k = 0
        self.window = RateWindow(spec.name, window_s)
        self.is_source = spec.name == GENERATE


class Engine:
    """Drives one pipeline run; create a fresh engine per run."""

    def __init__(
        self,
        topology: PipelineTopology,
        workload: PipelineWorkload,
        backend: Any,
        clock: Any,
        budget: Budget,
        *,
        trace: Optional[TraceRecorder] = None,
        barrier: bool = False,
        reflectors: Optional[dict[str, Any]] = None,
        control: Optional[ControlConfig] = None,
    ) -> None:
        self.topology = topology
        self.pool = topology.pool
        self.policy = topology.policy
        self.handlers = workload.handlers
        self.ctx = HandlerContext(self.pool, workload.runtime, workload.run_seed)
        self.backend = backend
        self.clock = clock
        self.budget = budget
        self.trace = trace if trace is not None else TraceRecorder()
        self.barrier = barrier
        self.reflectors = reflectors or {}
        self.control = control or ControlConfig()
        self.counters = Counters()

        if self.policy.variant is PolicyKind.REFLECTIVE:
            if self.policy.reflector_id not in self.reflectors:
                raise ConfigError(
                    f"no reflector registered as {self.policy.reflector_id!r}"
                )

        self.queues: dict[str, StageQueue] = {
            s.name: StageQueue(s.name, topology.queue_capacity) for s in topology.stages
        }
        self.stages: dict[str, StageState] = {
            s.name: StageState(s, self.control.window_s) for s in topology.stages
        }
        self.queue_lock = threading.RLock()
        self._state_lock = threading.RLock()
        self._live = 0
        self._item_seq = itertools.count()
        self._lineage_seq = itertools.count()
        self._committing = threading.local()
        self._driver: Optional[Any] = None
        self._wire_hooks()

    # -- instrumentation -------------------------------------------------------

    def _wire_hooks(self) -> None:
        def on_update(update) -> None:
            # Called inside the pool lock; _best_score is consistent here.
            self.trace.record(
                t=self.clock.now,
                kind="pool_update",
                stage="pool",
                item_id=update.artifact_id,
                version=update.version,
                detail={
                    "op": update.op.value,
                    "summary": update.summary,
                    "best_score": self.pool._best_score,
                    "by_item": getattr(self._committing, "item_id", ""),
                },
            )

        self.pool.listener = on_update

        if hasattr(self.backend, "on_start"):
            def on_start(request, t: float) -> None:
                self.trace.record(
                    t=t, kind="backend_start", stage=request.stage,
                    item_id=request.request_id, version=0, detail={},
                )

            def on_end(request, response, t: float) -> None:
                self.trace.record(
                    t=t, kind="backend_end", stage=request.stage,
                    item_id=request.request_id, version=0,
                    detail={
                        "output_tokens": response.output_tokens,
                        "latency": response.latency,
                    },
                )

            self.backend.on_start = on_start
            self.backend.on_end = on_end

    def _record(self, kind: str, stage: str, item_id: str, detail: dict) -> None:
        self.trace.record(
            t=self.clock.now, kind=kind, stage=stage, item_id=item_id,
            version=self.pool.version, detail=detail,
        )

    # -- public controls ---------------------------------------------------------

    def set_worker_count(self, stage_name: str, k: int) -> None:
        """Change a stage's worker count within its bounds.

        Increases spawn immediately; decreases retire excess workers after
        they finish their current item, never mid-handler.
        """
        state = self.stages[stage_name]
        if not state.spec.k_min <= k <= state.spec.k_max:
            raise BoundsError(
                f"{stage_name}: k={k} outside [{state.spec.k_min}, {state.spec.k_max}]"
            )
        with self._state_lock:
            previous, state.desired_k = state.desired_k, k
            spawn = max(0, k - state.active_k)
        if previous != k:
            self._record(
                "worker_count_change", stage_name, "",
                {"from": previous, "to": k},
            )
        for _ in range(spawn):
            self._driver.spawn(stage_name)

    def mark_stale_lineage(self, rolled_back_artifact_id: str) -> int:
        """Flag every queued item depending on a rolled-back speculative
        artifact; flagged items hit the staleness gate as infinitely stale."""
        count = 0
        with self.queue_lock:
            for queue in self.queues.values():
                for item in queue.items:
                    if rolled_back_artifact_id in item.spec_lineage:
                        item.force_stale = True
                        count += 1
        with self._state_lock:
            self.counters.force_stale_flagged += count
        return count

    def budget_exhausted(self) -> bool:
        return self.budget.exhausted(self.clock.now, self.pool.version)

    # -- run ---------------------------------------------------------------------

    def run(self) -> None:
        if isinstance(self.clock, EventLoop):
            self._driver = _DesDriver(self)
        else:
            self._driver = _ThreadDriver(self)
        self._driver.run()

    def report(self, *, config_echo: Optional[dict] = None, seed: Optional[int] = None) -> RunReport:
        horizon = self.budget.max_time if self.budget.max_time is not None else self.clock.now
        return compute_report(
            self.trace.events, horizon, config_echo=config_echo, seed=seed
        )

    # -- worker body -------------------------------------------------------------

    # A source stage manufactures its own work, so a persistently failing
    # generate handler could spin at one virtual instant; back off instead.
    SOURCE_FAIL_BACKOFF_S = 0.05

    def _worker(self, stage_name: str):
        stage = self.stages[stage_name]
        while True:
            item = yield Pop(stage_name)
            if item is RETIRE:
                return
            outcome = yield from self._work_cycle(stage, item)
            if outcome == "failed" and stage.is_source:
                yield Sleep(self.SOURCE_FAIL_BACKOFF_S)

    def _controller_loop(self):
        while True:
            yield Sleep(self.control.period_s)
            if self.budget_exhausted():
                return
            now = self.clock.now
            with self._state_lock:
                rates = {name: st.window.rate(now) for name, st in self.stages.items()}
                current = {name: st.desired_k for name, st in self.stages.items()}
                bounds = {
                    name: (st.spec.k_min, st.spec.k_max) for name, st in self.stages.items()
                }
            new_counts = adjust_workers(rates, current, bounds)
            for name, k in new_counts.items():
                if k != current[name]:
                    self.set_worker_count(name, k)

    def _work_cycle(self, stage: StageState, item: QueueItem):
        """One worker step: gate the item, then run its stage handler.

        Returns the step outcome: processed | discarded | patched |
        failed | routed.
        """
        if stage.spec.name == REFLECT:
            outcome = yield from self._reflect_cycle(stage, item)
            return outcome

        delta = version_gap(item, self.pool)
        if (
            self.policy.variant is PolicyKind.REFLECTIVE
            and delta > 0
            and not stage.is_source
        ):
            # Hand the stale item to the reflection stage; this transfer is
            # not a ledger pop, the item is still queued work.
            with self._state_lock:
                self.counters.routed += 1
                self.counters.stale_seen += 1
            yield Push(REFLECT, item, restamp=False, routed=True)
            return "routed"

        decision = gate(item, self.pool, self.policy)
        self._record(
            "pop", stage.spec.name, item.item_id,
            {
                "delta": decision.delta,
                "decision": decision.outcome.value,
                "force_stale": item.force_stale,
                "tentative": item.tentative,
            },
        )
        with self._state_lock:
            self.counters.pops += 1
            if decision.delta > 0:
                self.counters.stale_seen += 1
        if decision.outcome is GateOutcome.DISCARD:
            self._discard_item(stage.spec.name, item, decision.reason or "delta_exceeded", decision.delta)
            return "discarded"
        outcome = yield from self._run_handler(stage, item)
        return outcome

    def _run_handler(self, stage: StageState, item: QueueItem):
        handler = self.handlers[stage.spec.handler_id]
        try:
            prepared = handler.prepare(self.ctx, item)
        except Exception as exc:
            self._fail_item(stage.spec.name, item, exc)
            return "failed"

        responses: list = []
        stage_tokens = 0
        released_tokens = 0
        release_count = 0
        spec_artifact_id: Optional[str] = None
        tracker = (
            FanoutTracker(item.item_id, len(prepared.requests), stage.spec.alpha_spec)
            if prepared.requests
            else None
        )

        pending = [self.backend.submit(r) for r in prepared.requests]
        while pending:
            completion = yield AwaitAny(tuple(pending))
            pending.remove(completion)
            try:
                response = completion.result
            except Exception as exc:
                self._fail_item(stage.spec.name, item, exc)
                return "failed"
            responses.append(response)
            stage_tokens += response.output_tokens
            event = tracker.record(response)
            if event != "release":
                continue
            release_count = tracker.release_count
            released_tokens = stage_tokens
            try:
                action = handler.on_release(self.ctx, prepared.state, tracker.partial_results())
            except Exception as exc:
                self._fail_item(stage.spec.name, item, exc)
                return "failed"
            if isinstance(action, Outputs):
                with self._state_lock:
                    self.counters.releases += 1
                yield from self._push_outputs(
                    stage, item, action, tentative=True,
                    tokens=item.tokens_spent + stage_tokens,
                )
            elif isinstance(action, PartialEval):
                with self._state_lock:
                    self.counters.releases += 1
                spec_artifact_id = self._try_speculative_insert(item, action)

        try:
            final = handler.on_complete(self.ctx, prepared.state, responses, release_count)
        except Exception as exc:
            self._fail_item(stage.spec.name, item, exc)
            return "failed"

        if isinstance(final, Outputs):
            tokens = (
                stage_tokens - released_tokens
                if release_count
                else item.tokens_spent + stage_tokens
            )
            yield from self._push_outputs(stage, item, final, tentative=False, tokens=tokens)
        elif isinstance(final, EvalResult):
            self._finish_eval(stage, item, final, spec_artifact_id, stage_tokens)

        with self._state_lock:
            self.counters.processed += 1
        self._resolve_item(item)
        return "processed"

    def _reflect_cycle(self, stage: StageState, item: QueueItem):
        delta = version_gap(item, self.pool)
        self._record(
            "pop", REFLECT, item.item_id,
            {"delta": delta, "decision": "reflect", "force_stale": item.force_stale,
             "tentative": item.tentative},
        )
        with self._state_lock:
            self.counters.pops += 1
        reflector = self.reflectors[self.policy.reflector_id]
        updates = self.pool.updates_between(item.origin_version, self.pool.version)
        try:
            edits = _edits_view(item.payload)
            request = reflector.build_request(edits, updates)
            response = None
            if request is not None:
                completion = yield AwaitAny((self.backend.submit(request),))
                response = completion.result
                item.tokens_spent += response.output_tokens
            verdict = reflector.decide(edits, updates, response)
        except Exception:
            self._discard_item(REFLECT, item, "reflector_error", delta)
            return "discarded"

        from ..staleness import Keep

        if not isinstance(verdict, Keep):
            self._discard_item(REFLECT, item, "reflector_drop", delta)
            return "discarded"

        patched_payload = _apply_patch(item.payload, verdict.payload, updates)
        with self._state_lock:
            self.counters.patched += 1
        self._record(
            "patch", REFLECT, item.item_id,
            {"surviving_edits": dict(sorted(verdict.payload.items())), "to": item.stage},
        )
        lineage = frozenset(
            aid for aid in item.spec_lineage
            if self.pool.entry_status(aid) is EntryStatus.SPECULATIVE
        )
        patched = QueueItem(
            item_id=self._next_item_id(),
            stage=item.stage,
            payload=patched_payload,
            spec_lineage=lineage,
            tentative=item.tentative,
            produced_by=REFLECT,
            tokens_spent=item.tokens_spent,
            lineage_id=item.lineage_id,
        )
        yield Push(item.stage, patched, restamp=True, routed=False)
        self._resolve_item(item)
        return "patched"

    # -- item bookkeeping -------------------------------------------------------

    def _next_item_id(self) -> str:
        return f"i{next(self._item_seq)}"

    def _make_tick(self) -> QueueItem:
        tick = QueueItem(
            item_id=self._next_item_id(),
            stage=GENERATE,
            payload=None,
            origin_version=self.pool.version,
            created_at=self.clock.now,
            produced_by="source",
            lineage_id=next(self._lineage_seq),
        )
        with self._state_lock:
            self._live += 1
            self.counters.source_ticks += 1
        return tick

    def _push_outputs(self, stage: StageState, src: QueueItem, action: Outputs, *, tentative: bool, tokens: int):
        dest = self.topology.edges.get(stage.spec.name)
        if dest is None or dest == "pool":
            return
        first = True
        for out in action.outputs:
            item = QueueItem(
                item_id=self._next_item_id(),
                stage=dest,
                payload=out.payload,
                spec_lineage=src.spec_lineage | out.extra_lineage,
                tentative=tentative,
                produced_by=stage.spec.name,
                tokens_spent=tokens if first else 0,
                lineage_id=src.lineage_id,
            )
            first = False
            yield Push(dest, item, restamp=True, routed=False)

    def _on_push_commit(self, queue: StageQueue, push: Push) -> None:
        """Driver hook, called when a push lands in its queue."""
        item = push.item
        now = self.clock.now
        if push.restamp:
            item.origin_version = self.pool.version
            item.created_at = now
        if not push.routed:
            with self._state_lock:
                self._live += 1
                state = self.stages.get(item.produced_by)
                if state is not None:
                    state.window.record(now)
        payload_trace = (
            item.payload.to_trace() if hasattr(item.payload, "to_trace") else item.payload
        )
        self._record(
            "push", item.produced_by, item.item_id,
            {
                "to": queue.name,
                "payload": payload_trace,
                "tentative": item.tentative,
                "routed": push.routed,
                "lineage": item.lineage_id,
                "origin_version": item.origin_version,
            },
        )

    def _resolve_item(self, item: QueueItem) -> None:
        with self._state_lock:
            self._live -= 1
            drained = self._live == 0
        if drained and self._driver is not None:
            self._driver.on_drain()

    def _discard_item(self, stage_name: str, item: QueueItem, reason: str, delta: int) -> None:
        with self._state_lock:
            self.counters.discarded += 1
            self.counters.wasted_tokens += item.tokens_spent
        self._record(
            "discard", stage_name, item.item_id,
            {"reason": reason, "delta": delta, "wasted_tokens": item.tokens_spent},
        )
        self._resolve_item(item)

    def _fail_item(self, stage_name: str, item: QueueItem, exc: Exception) -> None:
        with self._state_lock:
            self.counters.failed += 1
        self._record(
            "discard", stage_name, item.item_id,
            {"reason": "handler_error", "error": f"{type(exc).__name__}: {exc}"},
        )
        self._resolve_item(item)

    # -- pool commits -------------------------------------------------------------

    def _try_speculative_insert(self, item: QueueItem, action: PartialEval) -> Optional[str]:
        if speculative_eval_gate(action.partial, self.pool) is SpecGate.HOLD:
            return None
        self._committing.item_id = item.item_id
        try:
            self.pool.insert_speculative(
                action.artifact, action.partial.score, summary=action.summary
            )
        except (GateFailed, DuplicateArtifact):
            return None
        finally:
            self._committing.item_id = ""
        with self._state_lock:
            self.counters.speculative_inserts += 1
        return action.artifact.artifact_id

    def _finish_eval(
        self,
        stage: StageState,
        item: QueueItem,
        result: EvalResult,
        spec_artifact_id: Optional[str],
        stage_tokens: int,
    ) -> None:
        self._committing.item_id = item.item_id
        try:
            if spec_artifact_id is not None:
                outcome, _ = self.pool.confirm_speculative(
                    spec_artifact_id, result.full_score, summary=result.summary
                )
                if outcome is ConfirmOutcome.CONFIRMED:
                    with self._state_lock:
                        self.counters.confirms += 1
                else:
                    with self._state_lock:
                        self.counters.rollbacks += 1
                        self.counters.wasted_tokens += item.tokens_spent + stage_tokens
                    self.mark_stale_lineage(spec_artifact_id)
                    self._record(
                        "discard", stage.spec.name, spec_artifact_id,
                        {
                            "reason": "rollback",
                            "wasted_tokens": item.tokens_spent + stage_tokens,
                        },
                    )
            else:
                inserted = self.pool.insert_if_improves(
                    result.artifact, result.full_score, summary=result.summary
                )
                if inserted is None:
                    with self._state_lock:
                        self.counters.rejected += 1
                    self._record(
                        "discard", stage.spec.name, item.item_id,
                        {"reason": "rejected", "score": result.full_score},
                    )
        finally:
            self._committing.item_id = ""
        with self._state_lock:
            self.counters.reconciles += 1
            stage.window.record(self.clock.now)
        self.ctx.runtime.record_eval(result.per_sample)


# -- discrete-event driver --------------------------------------------------------


class _Worker:
    __slots__ = ("gen", "stage", "await_token")

    def __init__(self, gen, stage: Optional[str]) -> None:
        self.gen = gen
        self.stage = stage
        self.await_token: Optional[object] = None


class _DesDriver:
    """Single-threaded deterministic executor on the engine's event loop."""

    def __init__(self, engine: Engine) -> None:
        self.engine = engine
        self.loop: EventLoop = engine.clock
        self.pop_waiters: dict[str, list[_Worker]] = {name: [] for name in engine.queues}
        self.push_waiters: dict[str, list[tuple[_Worker, Push]]] = {
            name: [] for name in engine.queues
        }
        self.barrier_waiters: list[_Worker] = []

    def run(self) -> None:
        for name, state in self.engine.stages.items():
            for _ in range(state.desired_k):
                self.spawn(name)
        if self.engine.control.adaptive:
            controller = _Worker(self.engine._controller_loop(), None)
            self._schedule_send(controller, None)
        self.loop.run()

    def spawn(self, stage_name: str) -> None:
        worker = _Worker(self.engine._worker(stage_name), stage_name)
        self.engine.stages[stage_name].active_k += 1
        self._schedule_send(worker, None)

    def on_drain(self) -> None:
        if self.barrier_waiters:
            worker = self.barrier_waiters.pop(0)
            self.loop.call_later(0.0, lambda: self._attempt_pop(worker))

    def _schedule_send(self, worker: _Worker, value: Any) -> None:
        self.loop.call_later(0.0, lambda: self._send(worker, value))

    def _send(self, worker: _Worker, value: Any) -> None:
        try:
            effect = worker.gen.send(value)
        except StopIteration:
            return
        self._dispatch(worker, effect)

    def _dispatch(self, worker: _Worker, effect: Any) -> None:
        if isinstance(effect, Pop):
            self._attempt_pop(worker)
        elif isinstance(effect, Push):
            self._attempt_push(worker, effect)
        elif isinstance(effect, AwaitAny):
            self._attempt_await(worker, effect)
        elif isinstance(effect, Sleep):
            self.loop.call_later(effect.seconds, lambda: self._send(worker, None))
        else:
            raise RuntimeError(f"unknown effect {effect!r}")

    def _attempt_pop(self, worker: _Worker) -> None:
        engine = self.engine
        stage = engine.stages[worker.stage]
        # The budget gates admission only: the source stops, admitted work
        # drains through the remaining stages.
        if stage.active_k > stage.desired_k or (
            stage.is_source and engine.budget_exhausted()
        ):
            stage.active_k -= 1
            self._schedule_send(worker, RETIRE)
            return
        if stage.is_source:
            if engine.barrier and engine._live > 0:
                self.barrier_waiters.append(worker)
                return
            self._schedule_send(worker, engine._make_tick())
            return
        item = engine.queues[worker.stage].try_pop()
        if item is None:
            self.pop_waiters[worker.stage].append(worker)
            return
        self._wake_push_waiter(worker.stage)
        self._schedule_send(worker, item)

    def _attempt_push(self, worker: _Worker, push: Push) -> None:
        queue = self.engine.queues[push.queue]
        if queue.full():
            self.push_waiters[push.queue].append((worker, push))
            return
        queue.push(push.item)
        self.engine._on_push_commit(queue, push)
        if self.pop_waiters[push.queue]:
            waiter = self.pop_waiters[push.queue].pop(0)
            self.loop.call_later(0.0, lambda: self._attempt_pop(waiter))
        self._schedule_send(worker, None)

    def _wake_push_waiter(self, queue_name: str) -> None:
        if self.push_waiters[queue_name]:
            waiter, push = self.push_waiters[queue_name].pop(0)
            self.loop.call_later(0.0, lambda: self._attempt_push(waiter, push))

    def _attempt_await(self, worker: _Worker, effect: AwaitAny) -> None:
        for completion in effect.completions:
            if completion.done:
                self._schedule_send(worker, completion)
                return
        token = object()
        worker.await_token = token

        def wake(completion: Completion) -> None:
            if worker.await_token is token:
                worker.await_token = None
                self._schedule_send(worker, completion)

        for completion in effect.completions:
            completion.add_done_callback(wake)


# -- wall-clock thread driver ------------------------------------------------------


class _ThreadDriver:
    """Maps each worker to a real thread; used with wall clocks and the
    HTTP backend. Not deterministic, by nature."""

    _POLL_S = 0.02

    def __init__(self, engine: Engine) -> None:
        self.engine = engine
        self.stop = threading.Event()
        self.cv = threading.Condition(engine.queue_lock)
        self.threads: list[threading.Thread] = []

    def run(self) -> None:
        for name, state in self.engine.stages.items():
            for _ in range(state.desired_k):
                self.spawn(name)
        if self.engine.control.adaptive:
            self._start_thread(self.engine._controller_loop(), None)
        if self.engine.budget.max_time is not None:
            remaining = max(0.0, self.engine.budget.max_time - self.engine.clock.now)
            stopper = threading.Timer(remaining, self._budget_tick)
            stopper.daemon = True
            stopper.start()
        while True:
            with self.engine.queue_lock:
                alive = [t for t in self.threads if t.is_alive()]
            if not alive:
                break
            for t in alive:
                t.join(timeout=0.2)
        self._halt()

    def _budget_tick(self) -> None:
        # Admission stops now; workers drain what is already in flight and
        # on_drain halts the run once the pipeline empties.
        with self.engine._state_lock:
            drained = self.engine._live == 0
        if drained:
            self._halt()
        else:
            with self.cv:
                self.cv.notify_all()

    def _halt(self) -> None:
        self.stop.set()
        with self.cv:
            self.cv.notify_all()

    def spawn(self, stage_name: str) -> None:
        with self.engine._state_lock:
            self.engine.stages[stage_name].active_k += 1
        self._start_thread(self.engine._worker(stage_name), stage_name)

    def _start_thread(self, gen, stage: Optional[str]) -> None:
        worker = _Worker(gen, stage)
        thread = threading.Thread(target=self._drive, args=(worker,), daemon=True)
        with self.engine.queue_lock:
            self.threads.append(thread)
        thread.start()

    def on_drain(self) -> None:
        with self.cv:
            self.cv.notify_all()
        if self.engine.budget_exhausted():
            self._halt()

    def _drive(self, worker: _Worker) -> None:
        value = None
        while True:
            try:
                effect = worker.gen.send(value)
            except StopIteration:
                return
            value = self._execute(worker, effect)

    def _execute(self, worker: _Worker, effect: Any) -> Any:
        engine = self.engine
        if isinstance(effect, Pop):
            stage = engine.stages[worker.stage]
            with self.cv:
                while True:
                    if (
                        self.stop.is_set()
                        or stage.active_k > stage.desired_k
                        or (stage.is_source and engine.budget_exhausted())
                    ):
                        with engine._state_lock:
                            stage.active_k -= 1
                        return RETIRE
                    if stage.is_source:
                        if engine.barrier and engine._live > 0:
                            self.cv.wait(self._POLL_S)
                            continue
                        return engine._make_tick()
                    item = engine.queues[worker.stage].try_pop()
                    if item is not None:
                        self.cv.notify_all()
                        return item
                    self.cv.wait(self._POLL_S)
        if isinstance(effect, Push):
            queue = engine.queues[effect.queue]
            with self.cv:
                while queue.full() and not self.stop.is_set():
                    self.cv.wait(self._POLL_S)
                queue.push(effect.item)
                engine._on_push_commit(queue, effect)
                self.cv.notify_all()
            return None
        if isinstance(effect, AwaitAny):
            latch = Completion()
            lock = threading.Lock()
            fired = [False]

            def wake(completion: Completion) -> None:
                with lock:
                    if fired[0]:
                        return
                    fired[0] = True
                latch.resolve(completion)

            for completion in effect.completions:
                completion.add_done_callback(wake)
            latch.wait()
            return latch.result
        if isinstance(effect, Sleep):
            self.stop.wait(effect.seconds)
            return None
        raise RuntimeError(f"unknown effect {effect!r}")


def run_pipeline(
    topology: PipelineTopology,
    workload: PipelineWorkload,
    backend: Any,
    clock: Any,
    budget: Budget,
    *,
    trace: Optional[TraceRecorder] = None,
    barrier: bool = False,
    reflectors: Optional[dict[str, Any]] = None,
    control: Optional[ControlConfig] = None,
    config_echo: Optional[dict] = None,
    seed: Optional[int] = None,
) -> RunReport:
    """Run the loop until the budget is exhausted and the pipeline drains,
    then compute the report from the trace."""
    engine = Engine(
        topology, workload, backend, clock, budget,
        trace=trace, barrier=barrier, reflectors=reflectors, control=control,
    )
    engine.run()
    return engine.report(config_echo=config_echo, seed=seed)

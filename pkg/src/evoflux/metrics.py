"""Event trace, run reports, and throughput/evolution-rate arithmetic.

Every observable run action lands in one JSONL-able event stream:
``{t, kind, stage, item_id, version, detail}``. Reports are recomputed
from the trace alone, so a saved trace can be replayed at any time.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from .errors import MalformedTrace, UndefinedBaseline

EVENT_KINDS = (
    "pop",
    "push",
    "discard",
    "patch",
    "pool_update",
    "worker_count_change",
    "backend_start",
    "backend_end",
)

# Discard reasons attributable to staleness handling (feed discard_count and
# wasted-token accounting). "rejected" is the ordinary acceptance filter and
# "handler_error" the fault path; neither is staleness waste.
STALE_DISCARD_REASONS = ("delta_exceeded", "force_stale", "reflector_drop", "reflector_error")


class TraceRecorder:
    """Append-only event sink, thread-safe, optionally mirrored to JSONL."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.events: list[dict] = []

    def record(
        self,
        t: float,
        kind: str,
        stage: str = "",
        item_id: str = "",
        version: int = 0,
        detail: Optional[dict] = None,
    ) -> None:
        if kind not in EVENT_KINDS:
            raise MalformedTrace(f"unknown event kind {kind!r}")
        event = {
            "t": t,
            "kind": kind,
            "stage": stage,
            "item_id": item_id,
            "version": version,
            "detail": detail or {},
        }
        with self._lock:
            self.events.append(event)

    def save_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(json.dumps(event, sort_keys=True) + "\n")


def load_trace(path: str) -> list[dict]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedTrace(f"line {line_no}: {exc}") from exc
            _check_event(event, line_no)
            events.append(event)
    return events


def _check_event(event: Any, where: Any) -> None:
    if not isinstance(event, dict):
        raise MalformedTrace(f"event {where}: not an object")
    missing = {"t", "kind", "stage", "item_id", "version", "detail"} - set(event)
    if missing:
        raise MalformedTrace(f"event {where}: missing {sorted(missing)}")
    if event["kind"] not in EVENT_KINDS:
        raise MalformedTrace(f"event {where}: unknown kind {event['kind']!r}")


@dataclass
class RunReport:
    tokens_per_second: float
    proposals_per_min: float
    accepted_proposals_per_min: float
    wasted_tokens: int
    discard_count: int
    patch_count: int
    stale_count: int
    failed_count: int
    rejected_count: int
    pop_count: int
    processed_count: int
    score_curve: list[tuple[float, float]]
    concurrency_curve: list[tuple[float, int]]
    average_concurrency: float
    budget_seconds: float
    total_output_tokens: int
    initial_score: float
    final_score: float
    config_echo: dict = field(default_factory=dict)
    seed: Optional[int] = None
    generated_at: str = ""

    def to_dict(self) -> dict:
        return {
            "tokens_per_second": self.tokens_per_second,
            "proposals_per_min": self.proposals_per_min,
            "accepted_proposals_per_min": self.accepted_proposals_per_min,
            "wasted_tokens": self.wasted_tokens,
            "discard_count": self.discard_count,
            "patch_count": self.patch_count,
            "stale_count": self.stale_count,
            "failed_count": self.failed_count,
            "rejected_count": self.rejected_count,
            "pop_count": self.pop_count,
            "processed_count": self.processed_count,
            "score_curve": [[t, s] for t, s in self.score_curve],
            "concurrency_curve": [[t, c] for t, c in self.concurrency_curve],
            "average_concurrency": self.average_concurrency,
            "budget_seconds": self.budget_seconds,
            "total_output_tokens": self.total_output_tokens,
            "initial_score": self.initial_score,
            "final_score": self.final_score,
            "config_echo": self.config_echo,
            "seed": self.seed,
            "generated_at": self.generated_at,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        d["score_curve"] = [(t, s) for t, s in d.get("score_curve", [])]
        d["concurrency_curve"] = [(t, c) for t, c in d.get("concurrency_curve", [])]
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def comparable_dict(self) -> dict:
        """Everything except the wall-clock timestamp (determinism checks)."""
        d = self.to_dict()
        d.pop("generated_at")
        return d


def compute_report(
    trace: Iterable[dict],
    budget_seconds: float,
    *,
    config_echo: Optional[dict] = None,
    seed: Optional[int] = None,
) -> RunReport:
    """Derive all run metrics from the event trace.

    Only events with t <= budget enter the throughput numbers; a draining
    pipeline may emit a tail past the budget. Accepted proposals are
    confirmed pool inserts after t=0 (the t=0 insert is the seeded initial
    artifact, not a proposal).
    """
    events = sorted(trace, key=lambda e: (e["t"],))
    for event in events:
        _check_event(event, "?")

    horizon = float(budget_seconds)
    tokens = 0
    proposals = 0
    accepted = 0
    wasted = 0
    discards = 0
    patches = 0
    stale = 0
    failed = 0
    rejected = 0
    pops = 0
    score_curve: list[tuple[float, float]] = []
    inflight_curve: list[tuple[float, int]] = [(0.0, 0)]
    inflight = 0

    for event in events:
        t = event["t"]
        kind = event["kind"]
        detail = event["detail"]
        within = t <= horizon
        if kind == "backend_start" and within:
            inflight += 1
            inflight_curve.append((t, inflight))
        elif kind == "backend_end" and within:
            inflight -= 1
            inflight_curve.append((t, inflight))
            tokens += int(detail.get("output_tokens", 0))
        elif kind == "push" and within:
            if event["stage"] == "propose" and not detail.get("routed"):
                proposals += 1
        elif kind == "pool_update" and within:
            op = detail.get("op", "")
            if t > 0 and op in ("insert_confirmed", "confirm"):
                accepted += 1
            best = detail.get("best_score")
            if best is not None and (not score_curve or best != score_curve[-1][1]):
                score_curve.append((t, float(best)))
        elif kind == "pop" and within:
            pops += 1
            if detail.get("delta", 0) > 0:
                stale += 1
        elif kind == "discard" and within:
            reason = detail.get("reason", "")
            if reason in STALE_DISCARD_REASONS:
                discards += 1
                wasted += int(detail.get("wasted_tokens", 0))
            elif reason == "handler_error":
                failed += 1
            elif reason == "rejected":
                rejected += 1
            elif reason == "rollback":
                discards += 1
                wasted += int(detail.get("wasted_tokens", 0))
        elif kind == "patch" and within:
            patches += 1

    if not score_curve:
        score_curve = [(0.0, 0.0)]
    elif score_curve[0][0] > 0.0:
        score_curve.insert(0, (0.0, score_curve[0][1]))

    minutes = horizon / 60.0 if horizon > 0 else 0.0
    from .backend.base import average_concurrency

    processed = pops - discards - failed - patches
    return RunReport(
        tokens_per_second=tokens / horizon if horizon > 0 else 0.0,
        proposals_per_min=proposals / minutes if minutes else 0.0,
        accepted_proposals_per_min=accepted / minutes if minutes else 0.0,
        wasted_tokens=wasted,
        discard_count=discards,
        patch_count=patches,
        stale_count=stale,
        failed_count=failed,
        rejected_count=rejected,
        pop_count=pops,
        processed_count=processed,
        score_curve=score_curve,
        concurrency_curve=inflight_curve,
        average_concurrency=average_concurrency(inflight_curve, horizon),
        budget_seconds=horizon,
        total_output_tokens=tokens,
        initial_score=score_curve[0][1],
        final_score=score_curve[-1][1],
        config_echo=config_echo or {},
        seed=seed,
        generated_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    )


def normalized_evolution_rate(report: RunReport, baseline: RunReport) -> float:
    """Score improvement relative to the serial baseline's improvement.

    Raises UndefinedBaseline when the baseline made no progress; callers
    render that case as "--".
    """
    baseline_gain = baseline.final_score - baseline.initial_score
    if baseline_gain <= 0:
        raise UndefinedBaseline("baseline shows no score improvement")
    return (report.final_score - report.initial_score) / baseline_gain


def write_curves_csv(report: RunReport, score_path: str, concurrency_path: str) -> None:
    with open(score_path, "w", encoding="utf-8") as fh:
        fh.write("t,score\n")
        for t, s in report.score_curve:
            fh.write(f"{t},{s}\n")
    with open(concurrency_path, "w", encoding="utf-8") as fh:
        fh.write("t,inflight\n")
        for t, c in report.concurrency_curve:
            fh.write(f"{t},{c}\n")


def verify_counter_consistency(report: RunReport, engine_counters: dict) -> bool:
    """Cross-check trace-derived counts against the engine's own counters.

    The engine increments its counters at the actual code sites; the report
    recomputes them from the trace. Both must agree, and every pop must
    resolve to exactly one of processed/discarded/patched/failed.
    """
    identity = report.pop_count == (
        report.processed_count + report.discard_count + report.patch_count + report.failed_count
    )
    return (
        identity
        and report.pop_count == engine_counters.get("pops")
        and report.processed_count == engine_counters.get("processed")
        and report.discard_count == engine_counters.get("discarded")
        and report.patch_count == engine_counters.get("patched")
        and report.failed_count == engine_counters.get("failed")
    )

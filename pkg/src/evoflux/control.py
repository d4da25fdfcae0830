"""Adaptive workflow control.

Two independent mechanisms: worker reallocation driven by per-stage
production rates (half/twice-median rules, one step at a time, clamped to
per-stage bounds), and validation-set reordering that rotates samples with
long passing streaks out of the speculative prefix.
"""

from __future__ import annotations

import statistics
from collections import deque
from dataclasses import dataclass
from typing import Mapping, Sequence

from ._util import ceil_fraction
from .errors import UnknownSample

DEFAULT_DEMOTION_STREAK = 3  # consecutive passes before a sample leaves the prefix


class RateWindow:
    """Sliding-window production rate for one stage (items/second)."""

    def __init__(self, stage: str, window_seconds: float) -> None:
        if window_seconds <= 0:
            raise ValueError("window must be positive")
        self.stage = stage
        self.window_seconds = window_seconds
        self._pushes: deque[float] = deque()

    def record(self, t: float) -> None:
        self._pushes.append(t)

    def rate(self, now: float) -> float:
        cutoff = now - self.window_seconds
        while self._pushes and self._pushes[0] <= cutoff:
            self._pushes.popleft()
        return len(self._pushes) / self.window_seconds


def adjust_workers(
    rates: Mapping[str, float],
    current: Mapping[str, int],
    bounds: Mapping[str, tuple[int, int]],
) -> dict[str, int]:
    """One control-period adjustment from production rates.

    A stage below half the median rate gains one worker; above twice the
    median it loses one. Results stay within [k_min, k_max] and each stage
    moves by at most one per call. The rules are pure rate ratios, so
    rescaling every rate by the same positive constant changes nothing.
    Fewer than two rated stages: no-op.
    """
    if len(rates) < 2:
        return dict(current)
    median = statistics.median(rates.values())
    adjusted: dict[str, int] = {}
    for stage, k in current.items():
        rate = rates.get(stage)
        if rate is None:
            adjusted[stage] = k
            continue
        k_min, k_max = bounds[stage]
        if 2 * rate < median:
            adjusted[stage] = min(k + 1, k_max)
        elif rate > 2 * median:
            adjusted[stage] = max(k - 1, k_min)
        else:
            adjusted[stage] = k
    return adjusted


@dataclass
class PassHistory:
    sample_id: str
    consecutive_passes: int = 0
    position: int = 0


class ValidationTracker:
    """Pass streaks per validation sample, driving prefix demotion."""

    def __init__(self, sample_ids: Sequence[str], w: int = DEFAULT_DEMOTION_STREAK) -> None:
        self.w = w
        self._histories = {
            sid: PassHistory(sid, position=i) for i, sid in enumerate(sample_ids)
        }

    def record(self, sample_id: str, passed: bool) -> None:
        history = self._histories.get(sample_id)
        if history is None:
            raise UnknownSample(sample_id)
        history.consecutive_passes = history.consecutive_passes + 1 if passed else 0

    def streak(self, sample_id: str) -> int:
        history = self._histories.get(sample_id)
        if history is None:
            raise UnknownSample(sample_id)
        return history.consecutive_passes

    def eligible_for_demotion(self, sample_id: str) -> bool:
        return self.streak(sample_id) >= self.w


def record_validation_outcome(tracker: ValidationTracker, sample_id: str, passed: bool) -> None:
    tracker.record(sample_id, passed)


def reorder_validation(
    tracker: ValidationTracker, order: Sequence[str], alpha_spec: float
) -> list[str]:
    """Move long-passing samples out of the speculative prefix.

    The prefix is the first ceil(alpha_spec * len(order)) positions. Every
    prefix sample with a streak of at least w moves to the end; movers keep
    their relative order, as do non-movers. Always returns a permutation of
    the input.
    """
    prefix_len = ceil_fraction(alpha_spec, len(order))
    movers = [
        sid for i, sid in enumerate(order) if i < prefix_len and tracker.eligible_for_demotion(sid)
    ]
    mover_set = set(movers)
    kept = [sid for sid in order if sid not in mover_set]
    new_order = kept + movers
    for i, sid in enumerate(new_order):
        tracker._histories[sid].position = i
    return new_order

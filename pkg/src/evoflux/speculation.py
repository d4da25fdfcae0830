"""Speculative stage completion: partial release, score gate, reconcile.

A stage serving fan_out backend sub-requests may release a tentative
result once ceil(alpha_spec * fan_out) of them finish; the rest continue
in the background and a completion record reconciles the item when they
are all done. For evaluation stages the release is additionally gated by
partial score before a candidate may enter the pool speculatively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from ._util import ceil_fraction
from .errors import ConfigError
from .pool import ArtifactPool


def release_threshold(alpha_spec: float, fan_out: int) -> int:
    """Number of completed sub-requests that triggers a release.

    ceil (not floor), so alpha_spec -> 0+ still waits for at least one
    completion. Non-decreasing in alpha_spec for fixed fan_out.
    """
    if not 0 < alpha_spec <= 1:
        raise ConfigError(f"alpha_spec must be in (0, 1], got {alpha_spec}")
    if fan_out < 1:
        raise ConfigError(f"fan_out must be positive, got {fan_out}")
    return max(1, ceil_fraction(alpha_spec, fan_out))


@dataclass(frozen=True)
class PartialScore:
    """Pass ratio over the completed speculative prefix."""

    passed: int
    evaluated: int

    @property
    def score(self) -> float:
        return self.passed / self.evaluated if self.evaluated else 0.0


@dataclass(frozen=True)
class SpeculativeRelease:
    item_id: str
    released_fraction: float
    partial_results: list
    remaining: int


class SpecGate(str, Enum):
    INSERT = "insert"
    HOLD = "hold"


def speculative_eval_gate(partial: PartialScore, pool: ArtifactPool) -> SpecGate:
    """Insert speculatively only on strict improvement over the pool best."""
    return SpecGate.INSERT if partial.score > pool.best_score else SpecGate.HOLD


class ReconcileOutcome(str, Enum):
    CONFIRMED = "confirmed"
    ROLLED_BACK = "rolled_back"
    FINALIZED = "finalized"


@dataclass
class FanoutTracker:
    """Per-item release/reconcile state machine.

    Guarantees at most one tentative release and exactly one completion per
    item. A tentative release happens only when speculation is enabled
    (alpha_spec < 1) and the threshold falls strictly before full fan-out;
    otherwise the only event is the final completion.
    """

    item_id: str
    fan_out: int
    alpha_spec: float = 1.0
    results: list = field(default_factory=list)
    released: bool = False
    completed: bool = False

    def __post_init__(self) -> None:
        self.threshold = release_threshold(self.alpha_spec, self.fan_out)
        self._speculative = self.alpha_spec < 1.0 and self.threshold < self.fan_out

    @property
    def release_count(self) -> int:
        return self.threshold

    def record(self, result: Any) -> Optional[str]:
        """Register one finished sub-request.

        Returns "release" at the speculative threshold, "complete" at full
        fan-out, otherwise None.
        """
        if self.completed:
            raise RuntimeError(f"item {self.item_id} already reconciled")
        self.results.append(result)
        n = len(self.results)
        if n == self.fan_out:
            self.completed = True
            return "complete"
        if self._speculative and not self.released and n == self.threshold:
            self.released = True
            return "release"
        return None

    def release_info(self) -> SpeculativeRelease:
        if not self.released:
            raise RuntimeError("no release happened")
        return SpeculativeRelease(
            item_id=self.item_id,
            released_fraction=self.threshold / self.fan_out,
            partial_results=list(self.results[: self.threshold]),
            remaining=self.fan_out - self.threshold,
        )

    def partial_results(self) -> list:
        return list(self.results[: self.threshold])

    def remaining_results(self) -> list:
        """Results that arrived after the tentative release."""
        return list(self.results[self.threshold :]) if self.released else list(self.results)

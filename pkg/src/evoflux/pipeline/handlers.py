"""Stage-handler interface the engine drives.

Handlers split domain work from orchestration: ``prepare`` names the
backend sub-requests an item costs, ``on_release`` shapes the tentative
output at the speculative threshold, and ``on_complete`` shapes the final
output. The engine owns submission, speculative release bookkeeping, pool
commits, and downstream pushes.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Optional, Union

from ..backend.base import BackendRequest, BackendResponse
from ..pool import Artifact, ArtifactPool
from ..speculation import PartialScore


@dataclass(frozen=True)
class PreparedWork:
    requests: list[BackendRequest]
    state: Any = None


@dataclass(frozen=True)
class StageOutput:
    payload: Any
    extra_lineage: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Outputs:
    """Push these payloads to the downstream queue."""

    outputs: list[StageOutput] = field(default_factory=list)


@dataclass(frozen=True)
class PartialEval:
    """Speculative-prefix score plus the candidate to insert if it gates in."""

    partial: PartialScore
    artifact: Artifact
    summary: str


@dataclass(frozen=True)
class EvalResult:
    """Full-validation outcome; the engine applies the acceptance condition."""

    artifact: Artifact
    full_score: float
    per_sample: list[tuple[str, bool]]
    summary: str


ReleaseAction = Union[Outputs, PartialEval, None]
CompleteAction = Union[Outputs, EvalResult]


class HandlerContext:
    """What a handler may touch: the pool (read-mostly) and task runtime."""

    def __init__(self, pool: ArtifactPool, runtime: Any, run_seed: int) -> None:
        self.pool = pool
        self.runtime = runtime
        self.run_seed = run_seed


class StageHandler(ABC):
    handler_id = "custom"

    @abstractmethod
    def prepare(self, ctx: HandlerContext, item: Any) -> PreparedWork: ...

    def on_release(
        self, ctx: HandlerContext, state: Any, partial_responses: list[BackendResponse]
    ) -> ReleaseAction:
        return None

    @abstractmethod
    def on_complete(
        self,
        ctx: HandlerContext,
        state: Any,
        responses: list[BackendResponse],
        release_count: int,
    ) -> CompleteAction:
        """Shape the final output. ``responses`` are in completion order;
        the first ``release_count`` of them already went out tentatively
        (0 when no release happened)."""

"""Backend request/response types and the shared concurrency recorder."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

from ..sim import Completion


@dataclass(frozen=True)
class BackendRequest:
    """One LLM call. ``seed_material`` drives deterministic simulation;
    ``messages`` feed the HTTP chat endpoint."""

    request_id: str
    stage: str
    prompt_tokens: int = 0
    max_output_tokens: int = 1024
    seed_material: bytes = b""
    messages: Optional[list[dict]] = None

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0:
            raise ValueError("prompt_tokens must be >= 0")


@dataclass(frozen=True)
class BackendResponse:
    request_id: str
    output_tokens: int
    latency: float
    text_payload: str = ""

    def __post_init__(self) -> None:
        if self.latency <= 0:
            raise ValueError("latency must be positive")


class Backend(Protocol):
    """Anything that serves requests asynchronously."""

    def submit(self, request: BackendRequest) -> Completion: ...


# Hooks the pipeline installs to mirror backend activity into the event trace.
StartHook = Callable[[BackendRequest, float], None]
EndHook = Callable[[BackendRequest, BackendResponse, float], None]


class ConcurrencyRecorder:
    """Piecewise-constant in-flight request count over time."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._count = 0
        self._series: list[tuple[float, int]] = [(0.0, 0)]

    @property
    def current(self) -> int:
        with self._lock:
            return self._count

    def change(self, t: float, delta: int) -> None:
        with self._lock:
            self._count += delta
            self._series.append((t, self._count))

    def series(self) -> list[tuple[float, int]]:
        with self._lock:
            return list(self._series)

    def max_inflight(self) -> int:
        with self._lock:
            return max(c for _, c in self._series)


def average_concurrency(series: list[tuple[float, int]], horizon: float) -> float:
    """Time-average of a piecewise-constant series over [0, horizon]."""
    if horizon <= 0:
        return 0.0
    total = 0.0
    for (t0, c0), (t1, _) in zip(series, series[1:] + [(horizon, 0)]):
        lo, hi = min(t0, horizon), min(t1, horizon)
        if hi > lo:
            total += c0 * (hi - lo)
    return total / horizon

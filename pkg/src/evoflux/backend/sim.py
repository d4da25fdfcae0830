"""Simulated LLM serving under a virtual clock.

Continuous batching is abstracted as a fixed number of concurrent slots:
requests queue FIFO for admission and, once admitted, complete after
overhead + output_tokens / token_rate virtual seconds. Output lengths are
sampled deterministically per (rng_seed, request_id), independent of
submission order, so identical request streams always produce identical
responses and traces.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .._util import rng_for
from ..errors import ConfigError
from ..sim import Completion, EventLoop
from .base import BackendRequest, BackendResponse, ConcurrencyRecorder, EndHook, StartHook


@dataclass(frozen=True)
class LengthDist:
    """Output-length distribution: lognormal{mu, sigma} | pareto{scale, shape} | fixed{n}."""

    kind: str
    mu: float = 0.0
    sigma: float = 1.0
    scale: float = 1.0
    shape: float = 1.0
    n: int = 128

    def __post_init__(self) -> None:
        if self.kind not in ("lognormal", "pareto", "fixed"):
            raise ConfigError(f"unknown length distribution {self.kind!r}")

    def sample(self, rng_seed: int, request_id: str) -> int:
        rng = rng_for("len", rng_seed, request_id)
        if self.kind == "fixed":
            return self.n
        if self.kind == "lognormal":
            value = rng.lognormal(self.mu, self.sigma)
        else:
            value = (rng.pareto(self.shape) + 1.0) * self.scale
        return max(1, int(round(value)))

    def to_dict(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "n": self.n}
        if self.kind == "lognormal":
            return {"kind": "lognormal", "mu": self.mu, "sigma": self.sigma}
        return {"kind": "pareto", "scale": self.scale, "shape": self.shape}


def long_tail_preset(median_tokens: float = 100.0) -> LengthDist:
    """Synthetic heavy-tail preset with p99/p50 of roughly 10x.

    For a lognormal, p99/p50 = exp(2.3263 * sigma); sigma ~= 0.99 puts the
    ratio at ten. The exact shape is a qualitative stand-in, not a claim.
    """
    import math

    return LengthDist("lognormal", mu=math.log(median_tokens), sigma=0.99)


@dataclass(frozen=True)
class SimBackendConfig:
    capacity: int = 8
    token_rate: float = 50.0  # tokens/second per in-flight request
    length_dist: LengthDist = field(default_factory=lambda: long_tail_preset())
    rng_seed: int = 0
    overhead_s: float = 0.0  # flat per-request cost standing in for prefill

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ConfigError("capacity must be >= 1")
        if self.token_rate <= 0:
            raise ConfigError("token_rate must be positive")

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "token_rate": self.token_rate,
            "length_dist": self.length_dist.to_dict(),
            "rng_seed": self.rng_seed,
            "overhead_s": self.overhead_s,
        }


class SimBackend:
    """Capacity-limited simulated serving endpoint bound to an event loop."""

    def __init__(self, config: SimBackendConfig, loop: EventLoop) -> None:
        self.config = config
        self.loop = loop
        self.concurrency = ConcurrencyRecorder()
        self.total_output_tokens = 0
        self.on_start: Optional[StartHook] = None
        self.on_end: Optional[EndHook] = None
        self._waiting: deque[tuple[BackendRequest, Completion, float]] = deque()
        self._active = 0

    def submit(self, request: BackendRequest) -> Completion:
        completion = Completion()
        self._waiting.append((request, completion, self.loop.now))
        self._admit()
        return completion

    def _admit(self) -> None:
        # Work-conserving FIFO admission: a slot never idles while work waits.
        while self._active < self.config.capacity and self._waiting:
            request, completion, submitted_at = self._waiting.popleft()
            self._active += 1
            now = self.loop.now
            self.concurrency.change(now, +1)
            if self.on_start is not None:
                self.on_start(request, now)
            tokens = min(
                self.config.length_dist.sample(self.config.rng_seed, request.request_id),
                request.max_output_tokens,
            )
            service = self.config.overhead_s + tokens / self.config.token_rate
            self.loop.call_later(
                service,
                lambda r=request, c=completion, tk=tokens, t0=submitted_at: self._finish(
                    r, c, tk, t0
                ),
            )

    def _finish(
        self, request: BackendRequest, completion: Completion, tokens: int, submitted_at: float
    ) -> None:
        now = self.loop.now
        self._active -= 1
        self.concurrency.change(now, -1)
        self.total_output_tokens += tokens
        response = BackendResponse(
            request_id=request.request_id,
            output_tokens=tokens,
            latency=now - submitted_at,
            text_payload=f"sim:{request.request_id}:{tokens}",
        )
        if self.on_end is not None:
            self.on_end(request, response, now)
        self._admit()
        completion.resolve(response)

    def concurrency_trace(self) -> list[tuple[float, int]]:
        return self.concurrency.series()

    def drain(self, completions: list[Completion]) -> list[BackendResponse]:
        """Advance virtual time until every completion resolves (serial callers)."""
        self.loop.run_until(lambda: all(c.done for c in completions))
        return [c.result for c in completions]

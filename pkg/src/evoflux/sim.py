"""Deterministic discrete-event core: virtual clock, calendar, completions.

The event loop is single-threaded. Ties at the same virtual time are broken
by insertion sequence number, so a run is a pure function of its inputs.
"""

from __future__ import annotations

import heapq
import threading
import time
from typing import Any, Callable, Optional


class EventLoop:
    """Event calendar plus virtual clock.

    Callbacks scheduled with :meth:`call_at`/:meth:`call_later` run in
    (time, sequence) order. Time never flows backwards.
    """

    def __init__(self) -> None:
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0
        self._now = 0.0

    @property
    def now(self) -> float:
        return self._now

    def call_at(self, t: float, fn: Callable[[], None]) -> None:
        if t < self._now:
            raise ValueError(f"cannot schedule at {t} < now {self._now}")
        heapq.heappush(self._heap, (t, self._seq, fn))
        self._seq += 1

    def call_later(self, delay: float, fn: Callable[[], None]) -> None:
        if delay < 0:
            raise ValueError("negative delay")
        self.call_at(self._now + delay, fn)

    def step(self) -> bool:
        """Run the next event. Returns False when the calendar is empty."""
        if not self._heap:
            return False
        t, _, fn = heapq.heappop(self._heap)
        self._now = t
        fn()
        return True

    def run(self) -> None:
        """Run until the calendar drains."""
        while self.step():
            pass

    def run_until(self, predicate: Callable[[], bool]) -> None:
        """Run events until ``predicate()`` holds.

        Raises RuntimeError if the calendar drains first: the condition can
        then never be met.
        """
        while not predicate():
            if not self.step():
                raise RuntimeError("event loop drained before condition was met")

    def sleep_until(self, t: float) -> None:
        """Advance the clock to ``t`` with no intervening work."""
        if t > self._now:
            self.call_at(t, lambda: None)
            self.run_until(lambda: self._now >= t)


class WallClock:
    """Monotonic wall time, zeroed at construction."""

    def __init__(self) -> None:
        self._t0 = time.monotonic()

    @property
    def now(self) -> float:
        return time.monotonic() - self._t0


class Completion:
    """One-shot future usable from both the event loop and real threads.

    ``resolve``/``reject`` fire callbacks exactly once, in registration
    order. ``result`` re-raises a rejection.
    """

    __slots__ = ("_done", "_value", "_error", "_callbacks", "_event", "_lock")

    def __init__(self) -> None:
        self._done = False
        self._value: Any = None
        self._error: Optional[BaseException] = None
        self._callbacks: list[Callable[[Completion], None]] = []
        self._event = threading.Event()
        self._lock = threading.Lock()

    @property
    def done(self) -> bool:
        return self._done

    @property
    def result(self) -> Any:
        if not self._done:
            raise RuntimeError("completion not resolved yet")
        if self._error is not None:
            raise self._error
        return self._value

    def resolve(self, value: Any) -> None:
        self._finish(value, None)

    def reject(self, error: BaseException) -> None:
        self._finish(None, error)

    def _finish(self, value: Any, error: Optional[BaseException]) -> None:
        with self._lock:
            if self._done:
                raise RuntimeError("completion already resolved")
            self._done = True
            self._value = value
            self._error = error
            callbacks, self._callbacks = self._callbacks, []
        self._event.set()
        for cb in callbacks:
            cb(self)

    def add_done_callback(self, fn: Callable[[Completion], None]) -> None:
        """Register ``fn``; runs immediately if already resolved."""
        run_now = False
        with self._lock:
            if self._done:
                run_now = True
            else:
                self._callbacks.append(fn)
        if run_now:
            fn(self)

    def wait(self, timeout: Optional[float] = None) -> bool:
        """Block a real thread until resolved. Never use under the event loop."""
        return self._event.wait(timeout)

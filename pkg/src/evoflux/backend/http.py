"""OpenAI-compatible chat-completions client for wall-clock runs.

Speaks the minimal subset the pipeline needs: model, messages, max_tokens,
temperature out; usage token counts back. Outbound concurrency is bounded
by a thread pool sized to the connection limit. Retries with exponential
backoff on 429 and 5xx.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import httpx

from ..errors import BackendTimeout, BackendUnavailable
from ..sim import Completion
from .base import BackendRequest, BackendResponse, ConcurrencyRecorder, EndHook, StartHook

API_KEY_ENV = "EVOFLUX_API_KEY"
_RETRYABLE_STATUS = (429, 500, 502, 503, 504)


@dataclass(frozen=True)
class HttpBackendConfig:
    base_url: str
    model: str
    api_key: Optional[str] = None  # falls back to $EVOFLUX_API_KEY
    temperature: float = 0.7
    timeout_s: float = 120.0
    max_retries: int = 3
    backoff_s: float = 0.5
    connection_limit: int = 8

    def resolved_api_key(self) -> str:
        return self.api_key or os.environ.get(API_KEY_ENV, "")


class HttpBackend:
    """Thread-pooled chat-completions client behind the Backend protocol."""

    def __init__(
        self,
        config: HttpBackendConfig,
        transport: Optional[httpx.BaseTransport] = None,
        clock: Optional[object] = None,
    ) -> None:
        self.config = config
        self.concurrency = ConcurrencyRecorder()
        self.total_output_tokens = 0
        self.on_start: Optional[StartHook] = None
        self.on_end: Optional[EndHook] = None
        self._clock = clock  # shares the run's clock so trace times line up
        self._t0 = time.monotonic()
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            timeout=config.timeout_s,
            transport=transport,
        )
        self._executor = ThreadPoolExecutor(
            max_workers=config.connection_limit, thread_name_prefix="evoflux-http"
        )

    def _now(self) -> float:
        if self._clock is not None:
            return self._clock.now
        return time.monotonic() - self._t0

    def submit(self, request: BackendRequest) -> Completion:
        completion = Completion()

        def run() -> None:
            try:
                completion.resolve(self._call(request))
            except BaseException as exc:  # surfaces in the waiting worker
                completion.reject(exc)

        self._executor.submit(run)
        return completion

    def _call(self, request: BackendRequest) -> BackendResponse:
        body = {
            "model": self.config.model,
            "messages": request.messages
            or [{"role": "user", "content": request.seed_material.decode("utf-8", "replace")}],
            "max_tokens": request.max_output_tokens,
            "temperature": self.config.temperature,
        }
        headers = {}
        api_key = self.config.resolved_api_key()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        started = self._now()
        self.concurrency.change(started, +1)
        if self.on_start is not None:
            self.on_start(request, started)
        try:
            data = self._post_with_retries(body, headers)
        except BaseException:
            self.concurrency.change(self._now(), -1)
            raise
        ended = self._now()
        self.concurrency.change(ended, -1)

        usage = data.get("usage", {})
        tokens = int(usage.get("completion_tokens", 0))
        text = ""
        choices = data.get("choices", [])
        if choices:
            text = choices[0].get("message", {}).get("content", "") or ""
        response = BackendResponse(
            request_id=request.request_id,
            output_tokens=tokens,
            latency=max(ended - started, 1e-9),
            text_payload=text,
        )
        self.total_output_tokens += tokens
        if self.on_end is not None:
            self.on_end(request, response, ended)
        return response

    def _post_with_retries(self, body: dict, headers: dict) -> dict:
        last_error: Optional[Exception] = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.config.backoff_s * (2 ** (attempt - 1)))
            try:
                resp = self._client.post("/v1/chat/completions", json=body, headers=headers)
            except httpx.TimeoutException as exc:
                raise BackendTimeout(str(exc)) from exc
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if resp.status_code == 200:
                return resp.json()
            if resp.status_code in _RETRYABLE_STATUS:
                last_error = BackendUnavailable(f"status {resp.status_code}")
                continue
            raise BackendUnavailable(f"status {resp.status_code}: {resp.text[:200]}")
        raise BackendUnavailable(f"retries exhausted: {last_error}")

    def concurrency_trace(self) -> list[tuple[float, int]]:
        return self.concurrency.series()

    def close(self) -> None:
        self._executor.shutdown(wait=True)
        self._client.close()

    def __enter__(self) -> "HttpBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

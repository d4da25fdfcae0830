import json
import os

import httpx
import numpy as np
import pytest

from evoflux.backend import (
    BackendRequest,
    HttpBackend,
    HttpBackendConfig,
    LengthDist,
    SimBackend,
    SimBackendConfig,
    average_concurrency,
    long_tail_preset,
)
from evoflux.errors import BackendTimeout, BackendUnavailable
from evoflux.sim import EventLoop


def req(rid: str, stage: str = "generate", max_tokens: int = 4096) -> BackendRequest:
    return BackendRequest(request_id=rid, stage=stage, prompt_tokens=10, max_output_tokens=max_tokens)


def make_backend(loop, capacity=1, rate=100.0, dist=None, seed=0, overhead=0.0):
    return SimBackend(
        SimBackendConfig(
            capacity=capacity,
            token_rate=rate,
            length_dist=dist or LengthDist("fixed", n=100),
            rng_seed=seed,
            overhead_s=overhead,
        ),
        loop,
    )


def test_fixed_length_latency_arithmetic():
    loop = EventLoop()
    backend = make_backend(loop, capacity=1, rate=100.0)
    resp = backend.drain([backend.submit(req("r0"))])[0]
    assert resp.output_tokens == 100
    assert resp.latency == pytest.approx(1.0)
    assert loop.now == pytest.approx(1.0)


def test_capacity_one_serializes_requests():
    loop = EventLoop()
    backend = make_backend(loop, capacity=1, rate=100.0)
    c1, c2 = backend.submit(req("r0")), backend.submit(req("r1"))
    responses = backend.drain([c1, c2])
    assert responses[0].latency == pytest.approx(1.0)
    assert responses[1].latency == pytest.approx(2.0)  # waited for the slot
    assert loop.now == pytest.approx(2.0)


def test_overhead_adds_to_service_time():
    loop = EventLoop()
    backend = make_backend(loop, overhead=0.5)
    resp = backend.drain([backend.submit(req("r0"))])[0]
    assert resp.latency == pytest.approx(1.5)


def test_lognormal_sampling_is_deterministic_per_request_id():
    def run_once():
        loop = EventLoop()
        backend = make_backend(loop, capacity=4, dist=LengthDist("lognormal", mu=4.0, sigma=1.0), seed=9)
        comps = [backend.submit(req(f"r{i}")) for i in range(6)]
        return [r.output_tokens for r in backend.drain(comps)]

    assert run_once() == run_once()


def test_sampling_is_keyed_by_request_id_not_order():
    dist = LengthDist("lognormal", mu=4.0, sigma=1.0)
    loop = EventLoop()
    backend = make_backend(loop, capacity=2, dist=dist, seed=9)
    a = backend.drain([backend.submit(req("alpha"))])[0]
    loop2 = EventLoop()
    backend2 = make_backend(loop2, capacity=2, dist=dist, seed=9)
    backend2.drain([backend2.submit(req("other"))])
    b = backend2.drain([backend2.submit(req("alpha"))])[0]
    assert a.output_tokens == b.output_tokens


def test_output_tokens_capped_by_request_maximum():
    loop = EventLoop()
    backend = make_backend(loop, dist=LengthDist("fixed", n=500))
    resp = backend.drain([backend.submit(req("r0", max_tokens=64))])[0]
    assert resp.output_tokens == 64


def test_capacity_never_exceeded_under_random_load():
    rng = np.random.default_rng(3)
    loop = EventLoop()
    backend = make_backend(
        loop, capacity=3, rate=50.0, dist=LengthDist("lognormal", mu=4.0, sigma=1.0), seed=4
    )
    comps = []
    for i in range(40):
        loop.sleep_until(loop.now + float(rng.uniform(0, 0.3)))
        comps.append(backend.submit(req(f"r{i}")))
    backend.drain(comps)
    assert backend.concurrency.max_inflight() <= 3


def test_work_conservation_slots_stay_busy_while_work_waits():
    # 10 one-second requests into 3 slots, all submitted at t=0: the settled
    # in-flight count must be 3 until only the last request remains.
    loop = EventLoop()
    backend = make_backend(loop, capacity=3, rate=100.0)
    backend.drain([backend.submit(req(f"r{i}")) for i in range(10)])
    settled: dict[float, int] = {}
    for t, c in backend.concurrency_trace():
        settled[round(t, 9)] = c  # last value per timestamp wins
    assert settled == {0.0: 3, 1.0: 3, 2.0: 3, 3.0: 1, 4.0: 0}


def test_total_output_tokens_accumulates():
    loop = EventLoop()
    backend = make_backend(loop, capacity=2)
    responses = backend.drain([backend.submit(req(f"r{i}")) for i in range(5)])
    assert backend.total_output_tokens == sum(r.output_tokens for r in responses) == 500


def test_long_tail_preset_has_ten_to_one_p99_over_p50():
    dist = long_tail_preset(median_tokens=100.0)
    rng = np.random.default_rng(1)
    samples = rng.lognormal(dist.mu, dist.sigma, 200_000)
    ratio = np.percentile(samples, 99) / np.percentile(samples, 50)
    assert 8.0 < ratio < 12.0


def test_concurrency_trace_empty_and_single_request():
    loop = EventLoop()
    backend = make_backend(loop)
    assert backend.concurrency_trace() == [(0.0, 0)]
    assert average_concurrency(backend.concurrency_trace(), 10.0) == 0.0

    backend.drain([backend.submit(req("r0"))])
    series = backend.concurrency_trace()
    assert (0.0, 1) in series and series[-1] == (pytest.approx(1.0), 0)
    assert average_concurrency(series, 2.0) == pytest.approx(0.5)


# -- HTTP backend ---------------------------------------------------------------


def chat_response(tokens=32, content="hello"):
    return {
        "choices": [{"message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": 10, "completion_tokens": tokens},
    }


def test_http_backend_posts_openai_shape_and_parses_usage():
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["url"] = str(request.url)
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json=chat_response(tokens=77))

    config = HttpBackendConfig(base_url="http://fake", model="test-model", api_key="k-123")
    with HttpBackend(config, transport=httpx.MockTransport(handler)) as backend:
        request = BackendRequest(
            request_id="r0", stage="propose", prompt_tokens=5,
            max_output_tokens=128, messages=[{"role": "user", "content": "hi"}],
        )
        completion = backend.submit(request)
        completion.wait(5)
        response = completion.result

    assert seen["url"].endswith("/v1/chat/completions")
    assert seen["body"]["model"] == "test-model"
    assert seen["body"]["max_tokens"] == 128
    assert seen["body"]["messages"] == [{"role": "user", "content": "hi"}]
    assert seen["auth"] == "Bearer k-123"
    assert response.output_tokens == 77
    assert response.text_payload == "hello"
    assert backend.total_output_tokens == 77


def test_http_backend_reads_key_from_environment(monkeypatch):
    monkeypatch.setenv("EVOFLUX_API_KEY", "env-key")
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json=chat_response())

    config = HttpBackendConfig(base_url="http://fake", model="m")
    with HttpBackend(config, transport=httpx.MockTransport(handler)) as backend:
        backend.submit(BackendRequest(request_id="r0", stage="generate")).wait(5)
    assert seen["auth"] == "Bearer env-key"


def test_http_backend_retries_rate_limit_then_succeeds():
    calls = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        calls["n"] += 1
        if calls["n"] < 3:
            return httpx.Response(429, json={"error": "slow down"})
        return httpx.Response(200, json=chat_response())

    config = HttpBackendConfig(base_url="http://fake", model="m", backoff_s=0.01)
    with HttpBackend(config, transport=httpx.MockTransport(handler)) as backend:
        completion = backend.submit(BackendRequest(request_id="r0", stage="generate"))
        completion.wait(5)
        assert completion.result.output_tokens == 32
    assert calls["n"] == 3


def test_http_backend_gives_up_after_retries():
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(503)

    config = HttpBackendConfig(base_url="http://fake", model="m", max_retries=2, backoff_s=0.001)
    with HttpBackend(config, transport=httpx.MockTransport(handler)) as backend:
        completion = backend.submit(BackendRequest(request_id="r0", stage="generate"))
        completion.wait(5)
        with pytest.raises(BackendUnavailable):
            _ = completion.result


def test_http_backend_non_retryable_error_raises_immediately():
    calls = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        calls["n"] += 1
        return httpx.Response(400, text="bad request")

    config = HttpBackendConfig(base_url="http://fake", model="m")
    with HttpBackend(config, transport=httpx.MockTransport(handler)) as backend:
        completion = backend.submit(BackendRequest(request_id="r0", stage="generate"))
        completion.wait(5)
        with pytest.raises(BackendUnavailable):
            _ = completion.result
    assert calls["n"] == 1


def test_http_backend_timeout_maps_to_backend_timeout():
    def handler(request: httpx.Request) -> httpx.Response:
        raise httpx.ConnectTimeout("too slow")

    config = HttpBackendConfig(base_url="http://fake", model="m")
    with HttpBackend(config, transport=httpx.MockTransport(handler)) as backend:
        completion = backend.submit(BackendRequest(request_id="r0", stage="generate"))
        completion.wait(5)
        with pytest.raises(BackendTimeout):
            _ = completion.result

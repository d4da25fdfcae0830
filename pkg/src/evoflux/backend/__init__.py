from .base import (
    Backend,
    BackendRequest,
    BackendResponse,
    ConcurrencyRecorder,
    average_concurrency,
)
from .http import HttpBackend, HttpBackendConfig
from .sim import LengthDist, SimBackend, SimBackendConfig, long_tail_preset

__all__ = [
    "Backend",
    "BackendRequest",
    "BackendResponse",
    "ConcurrencyRecorder",
    "HttpBackend",
    "HttpBackendConfig",
    "LengthDist",
    "SimBackend",
    "SimBackendConfig",
    "average_concurrency",
    "long_tail_preset",
]

"""Deterministic hashing, seeding, and exact-arithmetic helpers.

Everything that injects randomness into a run derives it from named
substreams via :func:`rng_for`, so results depend only on the run seed and
the semantic identity of the consumer, never on call order or on Python's
per-process hash randomization.
"""

from __future__ import annotations

import hashlib
import json
import math
from fractions import Fraction
from typing import Any

import numpy as np


def canonical_json(obj: Any) -> str:
    """Serialize deterministically: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonify)


def _jsonify(obj: Any) -> Any:
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not canonically serializable: {type(obj)!r}")


def stable_hash(*parts: Any) -> int:
    """64-bit hash of the canonical encoding of ``parts``. Stable across runs."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bytes):
            h.update(b"b:" + part)
        else:
            h.update(b"j:" + canonical_json(part).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "big")


def rng_for(*parts: Any) -> np.random.Generator:
    """Generator for the substream named by ``parts``."""
    return np.random.default_rng(np.random.SeedSequence(stable_hash(*parts)))


def ceil_fraction(alpha: float, n: int) -> int:
    """ceil(alpha * n) computed exactly.

    ``alpha`` typically arrives as a config float like 0.25 or 0.3; it is
    reinterpreted as the simplest nearby rational so e.g. 0.3 * 10 is 3,
    not ceil(3.0000000000000004) = 4.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    frac = Fraction(alpha).limit_denominator(10**6)
    return int(math.ceil(frac * n))

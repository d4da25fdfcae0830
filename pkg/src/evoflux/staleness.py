"""Staleness policies applied when a queue item is consumed.

Three variants: pass everything (full), discard beyond a version-gap
threshold (guarded), or inspect-and-patch via a pluggable reflector
(reflective). The mock reflector classifies each field edit of a stale
payload against the intervening pool-update history as orthogonal,
subsumed, or conflicting, keeping only the orthogonal ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Optional, Protocol, Union, runtime_checkable

from .errors import ConfigError, FormatError, InvariantViolation, ReflectorError
from .pool import ArtifactPool, PoolUpdate, UpdateOp

# Gap reported for items whose speculative ancestor rolled back; larger than
# any configurable delta_max.
FORCED_GAP = 2**60


class PolicyKind(str, Enum):
    FULL = "full"
    GUARDED = "guarded"
    REFLECTIVE = "reflective"


@dataclass(frozen=True)
class StalenessPolicy:
    variant: PolicyKind
    delta_max: Optional[int] = None
    reflector_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.variant is PolicyKind.GUARDED:
            if self.delta_max is None or self.delta_max < 0:
                raise ConfigError("guarded policy requires delta_max >= 0")
        if self.variant is PolicyKind.REFLECTIVE and not self.reflector_id:
            raise ConfigError("reflective policy requires a reflector id")

    @classmethod
    def full(cls) -> "StalenessPolicy":
        return cls(PolicyKind.FULL)

    @classmethod
    def guarded(cls, delta_max: int) -> "StalenessPolicy":
        return cls(PolicyKind.GUARDED, delta_max=delta_max)

    @classmethod
    def reflective(cls, reflector_id: str = "mock") -> "StalenessPolicy":
        return cls(PolicyKind.REFLECTIVE, reflector_id=reflector_id)


class GateOutcome(str, Enum):
    CONTINUE = "continue"
    DISCARD = "discard"
    PATCHED = "patched"


@dataclass(frozen=True)
class GateDecision:
    outcome: GateOutcome
    delta: int
    patched_payload: Any = None
    reason: Optional[str] = None  # set on discard: delta_exceeded | force_stale |
    #                               reflector_drop | reflector_error

    def __post_init__(self) -> None:
        if self.outcome is GateOutcome.PATCHED and self.patched_payload is None:
            raise InvariantViolation("patched decision without payload")


def version_gap(item: Any, pool: ArtifactPool) -> int:
    """Delta between the current pool version and the item's origin version.

    Items flagged force_stale report FORCED_GAP, which exceeds any delta_max.
    """
    if getattr(item, "force_stale", False):
        return FORCED_GAP
    version = pool.version
    if item.origin_version > version:
        raise InvariantViolation(
            f"item origin {item.origin_version} > pool version {version}"
        )
    return version - item.origin_version


# -- reflectors ---------------------------------------------------------------


@dataclass(frozen=True)
class Keep:
    """Reflector verdict: the item still contributes; continue with this payload."""

    payload: Any


class Drop:
    """Reflector verdict: nothing useful survives; discard the item."""

    _instance: Optional["Drop"] = None

    def __new__(cls) -> "Drop":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Drop()"


DROP = Drop()
Verdict = Union[Keep, Drop]


@runtime_checkable
class Reflector(Protocol):
    """Decides whether a stale payload is still useful against pool history.

    ``build_request`` returns a backend request when the reflector needs an
    LLM call (None for pure reflectors); ``decide`` receives that call's
    response, or None when no request was made.
    """

    reflector_id: str

    def build_request(self, payload: Any, updates: list[PoolUpdate]) -> Optional[Any]: ...

    def decide(
        self, payload: Any, updates: list[PoolUpdate], response: Optional[Any]
    ) -> Verdict: ...


def encode_field_diff(fields: Mapping[str, int]) -> str:
    """Structured update summary: field-level diff consumable by reflectors."""
    return json.dumps({"fields": dict(sorted(fields.items()))}, sort_keys=True)


def decode_field_diff(summary: str) -> Optional[dict[str, int]]:
    """Parse a structured summary; None when the summary is free text."""
    try:
        data = json.loads(summary)
    except (json.JSONDecodeError, TypeError):
        return None
    if isinstance(data, dict) and isinstance(data.get("fields"), dict):
        return data["fields"]
    return None


# Updates that durably changed the pool; speculative inserts may roll back,
# so they do not count as applied knowledge when classifying edits.
_DURABLE_OPS = (UpdateOp.INSERT_CONFIRMED, UpdateOp.CONFIRM)


def mock_reflector(payload: Mapping[str, Any], updates: list[PoolUpdate]) -> Verdict:
    """Deterministic reflector over structured edit sets.

    Each edit {field: value} is classified against the durable updates in
    ``updates``: orthogonal (no durable update touched the field) edits are
    retained; subsumed (same value already applied) and conflicting
    (different value applied) edits are removed. Keep(surviving) when at
    least one edit survives, else Drop.
    """
    if not isinstance(payload, Mapping):
        raise FormatError(f"expected a field->value mapping, got {type(payload).__name__}")
    applied: dict[str, Any] = {}
    for update in updates:
        if update.op not in _DURABLE_OPS:
            continue
        diff = decode_field_diff(update.summary)
        if diff:
            applied.update(diff)
    surviving = {}
    for field, value in payload.items():
        if field not in applied:
            surviving[field] = value  # orthogonal
        # applied[field] == value -> subsumed; != value -> conflicting: both removed
    if surviving:
        return Keep(surviving)
    return DROP


class MockReflector:
    """Protocol wrapper around :func:`mock_reflector` (no backend calls)."""

    reflector_id = "mock"

    def build_request(self, payload: Any, updates: list[PoolUpdate]) -> Optional[Any]:
        return None

    def decide(
        self, payload: Any, updates: list[PoolUpdate], response: Optional[Any]
    ) -> Verdict:
        return mock_reflector(payload, updates)


class LlmReflector:
    """Reflector that asks a backend model whether a stale edit set is
    still worth applying against the intervening pool history.

    The model must answer with a JSON object {"action": "keep"|"drop",
    "edits": {...}}; kept edits must be a subset of the stale ones.
    Wall-clock use only; tests and simulation use the mock.
    """

    reflector_id = "llm"

    def __init__(self, max_output_tokens: int = 512) -> None:
        self.max_output_tokens = max_output_tokens
        self._n = 0

    def build_request(self, payload: Any, updates: list[PoolUpdate]) -> Any:
        from .backend.base import BackendRequest

        prompt = (
            "A proposed edit set became stale while newer changes landed.\n"
            f"Stale edits: {json.dumps(dict(payload), sort_keys=True)}\n"
            "Changes applied since, newest last:\n"
            + "\n".join(f"- {u.op.value}: {u.summary}" for u in updates)
            + "\nDecide which stale edits are still useful: drop any that are"
            " redundant or conflict with the applied changes. Reply with JSON"
            ' {"action": "keep", "edits": {...}} or {"action": "drop"}.'
        )
        self._n += 1
        return BackendRequest(
            request_id=f"reflect{self._n}",
            stage="reflect",
            prompt_tokens=max(1, len(prompt) // 4),
            max_output_tokens=self.max_output_tokens,
            seed_material=prompt.encode("utf-8"),
            messages=[{"role": "user", "content": prompt}],
        )

    def decide(self, payload: Any, updates: list[PoolUpdate], response: Any) -> Verdict:
        if response is None:
            raise ReflectorError("llm reflector needs a backend response")
        try:
            data = json.loads(response.text_payload)
            action = data["action"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ReflectorError(f"unparseable reflector reply: {exc}") from exc
        if action == "drop":
            return DROP
        if action != "keep":
            raise ReflectorError(f"unknown reflector action {action!r}")
        edits = data.get("edits", {})
        if not isinstance(edits, dict) or not set(edits) <= set(payload):
            raise ReflectorError("kept edits must be a subset of the stale edits")
        return Keep(edits) if edits else DROP


def _edits_view(payload: Any) -> Mapping[str, Any]:
    """Extract the structured edit set a reflector inspects."""
    if isinstance(payload, Mapping):
        return payload
    edits = getattr(payload, "edits", None)
    if edits is None:
        raise FormatError(f"payload {type(payload).__name__} exposes no edit set")
    return edits


def _apply_patch(payload: Any, surviving: Mapping[str, Any], updates: list[PoolUpdate]) -> Any:
    if isinstance(payload, Mapping):
        return dict(surviving)
    return payload.with_edits(surviving, updates)


def gate(
    item: Any,
    pool: ArtifactPool,
    policy: StalenessPolicy,
    reflector: Optional[Reflector] = None,
    backend: Any = None,
) -> GateDecision:
    """Apply a staleness policy to a popped item.

    full: continue (force-stale items are discarded so a rolled-back lineage
    can never re-enter the pool). guarded: continue iff the gap is within
    delta_max. reflective: fresh items continue untouched; stale ones go to
    the reflector with the intervening update log and either come back
    patched or are discarded. Reflector failures discard and are flagged so
    they can be counted separately.

    This is the synchronous form; the pipeline routes reflective items
    through a dedicated reflection stage instead of blocking the caller.
    """
    delta = version_gap(item, pool)
    forced = delta == FORCED_GAP

    if policy.variant is PolicyKind.FULL:
        if forced:
            return GateDecision(GateOutcome.DISCARD, delta, reason="force_stale")
        return GateDecision(GateOutcome.CONTINUE, delta)

    if policy.variant is PolicyKind.GUARDED:
        if delta <= policy.delta_max:  # boundary inclusive
            return GateDecision(GateOutcome.CONTINUE, delta)
        reason = "force_stale" if forced else "delta_exceeded"
        return GateDecision(GateOutcome.DISCARD, delta, reason=reason)

    # reflective
    if delta == 0:
        return GateDecision(GateOutcome.CONTINUE, delta)
    if reflector is None:
        raise ConfigError("reflective gate needs a reflector")
    updates = pool.updates_between(item.origin_version, pool.version)
    payload = getattr(item, "payload", item)
    try:
        edits = _edits_view(payload)
        request = reflector.build_request(edits, updates)
        response = None
        if request is not None:
            if backend is None:
                raise ReflectorError("reflector needs a backend for its request")
            completion = backend.submit(request)
            completion.wait()
            response = completion.result
        verdict = reflector.decide(edits, updates, response)
    except ReflectorError:
        return GateDecision(GateOutcome.DISCARD, delta, reason="reflector_error")
    except FormatError:
        return GateDecision(GateOutcome.DISCARD, delta, reason="reflector_error")
    if isinstance(verdict, Keep):
        patched = _apply_patch(payload, verdict.payload, updates)
        return GateDecision(GateOutcome.PATCHED, delta, patched_payload=patched)
    return GateDecision(GateOutcome.DISCARD, delta, reason="reflector_drop")

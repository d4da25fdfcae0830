"""Versioned shared store of evolution artifacts.

The pool holds confirmed and speculative entries, a dense append-only
update log, and a monotone version counter (one increment per committed
update). All mutations are serialized under one lock; readers take
consistent snapshots under the same lock.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Optional, Protocol

import numpy as np

from .errors import DuplicateArtifact, EmptyPool, GateFailed, NotSpeculative, RangeError


class ArtifactKind(str, Enum):
    PROMPT = "prompt"
    CONTEXT = "context"
    HARNESS = "harness"
    PROGRAM = "program"
    SYNTHETIC = "synthetic"


class EntryStatus(str, Enum):
    CONFIRMED = "confirmed"
    SPECULATIVE = "speculative"


class UpdateOp(str, Enum):
    INSERT_CONFIRMED = "insert_confirmed"
    INSERT_SPECULATIVE = "insert_speculative"
    CONFIRM = "confirm"
    ROLLBACK = "rollback"


class ConfirmOutcome(str, Enum):
    CONFIRMED = "confirmed"
    ROLLED_BACK = "rolled_back"


@dataclass(frozen=True)
class Artifact:
    """An opaque evolvable payload with lineage."""

    artifact_id: str
    payload: Any
    kind: ArtifactKind = ArtifactKind.SYNTHETIC
    parent_id: Optional[str] = None
    created_at_version: int = 0

    def to_dict(self) -> dict:
        return {
            "artifact_id": self.artifact_id,
            "payload": self.payload,
            "kind": self.kind.value,
            "parent_id": self.parent_id,
            "created_at_version": self.created_at_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Artifact":
        return cls(
            artifact_id=d["artifact_id"],
            payload=d["payload"],
            kind=ArtifactKind(d["kind"]),
            parent_id=d.get("parent_id"),
            created_at_version=d.get("created_at_version", 0),
        )


@dataclass
class PoolEntry:
    artifact: Artifact
    score: float
    status: EntryStatus
    inserted_at_version: int

    def to_dict(self) -> dict:
        return {
            "artifact": self.artifact.to_dict(),
            "score": self.score,
            "status": self.status.value,
            "inserted_at_version": self.inserted_at_version,
        }


@dataclass(frozen=True)
class PoolUpdate:
    """One committed change; log entry k carries version k."""

    version: int
    op: UpdateOp
    artifact_id: str
    summary: str

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "op": self.op.value,
            "artifact_id": self.artifact_id,
            "summary": self.summary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoolUpdate":
        return cls(d["version"], UpdateOp(d["op"]), d["artifact_id"], d["summary"])


class Selector(Protocol):
    """Pluggable candidate-selection strategy."""

    def __call__(
        self, entries: list[PoolEntry], rng: Optional[np.random.Generator]
    ) -> PoolEntry: ...


def best_score_selector(
    entries: list[PoolEntry], rng: Optional[np.random.Generator] = None
) -> PoolEntry:
    """Default strategy: highest score, ties to the earliest-inserted entry."""
    return min(entries, key=lambda e: (-e.score, e.inserted_at_version))


class ArtifactPool:
    """Linearizable artifact store with an append-only update log."""

    def __init__(self, *, speculative_selectable: bool = False) -> None:
        self._lock = threading.Lock()
        self._entries: dict[str, PoolEntry] = {}
        self._log: list[PoolUpdate] = []
        self._best_score = 0.0
        self.speculative_selectable = speculative_selectable
        # Called inside the lock after each commit, in version order.
        self.listener: Optional[Callable[[PoolUpdate], None]] = None

    # -- snapshot reads ----------------------------------------------------

    @property
    def version(self) -> int:
        with self._lock:
            return len(self._log)

    @property
    def best_score(self) -> float:
        """Maximum confirmed score; 0 when no confirmed entry exists."""
        with self._lock:
            return self._best_score

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def get(self, artifact_id: str) -> Optional[PoolEntry]:
        with self._lock:
            return self._entries.get(artifact_id)

    def snapshot(self) -> tuple[int, float]:
        """(version, best_score) read atomically."""
        with self._lock:
            return len(self._log), self._best_score

    # -- committed updates -------------------------------------------------

    def _append(self, op: UpdateOp, artifact_id: str, summary: str) -> int:
        update = PoolUpdate(len(self._log) + 1, op, artifact_id, summary)
        self._log.append(update)
        if self.listener is not None:
            self.listener(update)
        return update.version

    def insert_confirmed(
        self, artifact: Artifact, score: float, *, summary: Optional[str] = None
    ) -> int:
        with self._lock:
            if artifact.artifact_id in self._entries:
                raise DuplicateArtifact(artifact.artifact_id)
            version = len(self._log) + 1
            self._entries[artifact.artifact_id] = PoolEntry(
                artifact, score, EntryStatus.CONFIRMED, version
            )
            self._best_score = max(self._best_score, score)
            return self._append(
                UpdateOp.INSERT_CONFIRMED,
                artifact.artifact_id,
                summary if summary is not None else f"insert score={score:.4f}",
            )

    def insert_if_improves(
        self, artifact: Artifact, score: float, *, summary: Optional[str] = None
    ) -> Optional[int]:
        """Acceptance filter and insert in one atomic step.

        Returns the new version on strict improvement over the confirmed
        best, None when the candidate is filtered out.
        """
        with self._lock:
            if score <= self._best_score:
                return None
            if artifact.artifact_id in self._entries:
                raise DuplicateArtifact(artifact.artifact_id)
            version = len(self._log) + 1
            self._entries[artifact.artifact_id] = PoolEntry(
                artifact, score, EntryStatus.CONFIRMED, version
            )
            self._best_score = score
            return self._append(
                UpdateOp.INSERT_CONFIRMED,
                artifact.artifact_id,
                summary if summary is not None else f"insert score={score:.4f}",
            )

    def insert_speculative(
        self, artifact: Artifact, partial_score: float, *, summary: Optional[str] = None
    ) -> int:
        """Insert on a partial score. Rejects unless it strictly beats the best."""
        with self._lock:
            if artifact.artifact_id in self._entries:
                raise DuplicateArtifact(artifact.artifact_id)
            if partial_score <= self._best_score:
                raise GateFailed(
                    f"partial {partial_score:.4f} <= best {self._best_score:.4f}"
                )
            version = len(self._log) + 1
            self._entries[artifact.artifact_id] = PoolEntry(
                artifact, partial_score, EntryStatus.SPECULATIVE, version
            )
            # Speculative scores never move best_score.
            return self._append(
                UpdateOp.INSERT_SPECULATIVE,
                artifact.artifact_id,
                summary if summary is not None else f"speculative partial={partial_score:.4f}",
            )

    def confirm_speculative(
        self, artifact_id: str, full_score: float, *, summary: Optional[str] = None
    ) -> tuple[ConfirmOutcome, int]:
        """Re-check the acceptance condition with the full score.

        Confirms (status flips, score replaced) when the full score still
        strictly beats the best confirmed score at this moment; otherwise
        the entry is removed. Either way the version advances by one.
        """
        with self._lock:
            entry = self._entries.get(artifact_id)
            if entry is None or entry.status is not EntryStatus.SPECULATIVE:
                raise NotSpeculative(artifact_id)
            if full_score > self._best_score:
                entry.status = EntryStatus.CONFIRMED
                entry.score = full_score
                self._best_score = max(self._best_score, full_score)
                version = self._append(
                    UpdateOp.CONFIRM,
                    artifact_id,
                    summary if summary is not None else f"confirm score={full_score:.4f}",
                )
                return ConfirmOutcome.CONFIRMED, version
            del self._entries[artifact_id]
            version = self._append(
                UpdateOp.ROLLBACK,
                artifact_id,
                f"rollback full={full_score:.4f} best={self._best_score:.4f}",
            )
            return ConfirmOutcome.ROLLED_BACK, version

    # -- log queries ---------------------------------------------------------

    def updates_between(self, v_from: int, v_to: int) -> list[PoolUpdate]:
        """Log entries with version in (v_from, v_to], in order."""
        with self._lock:
            if not 0 <= v_from <= v_to <= len(self._log):
                raise RangeError(f"({v_from}, {v_to}] outside 0..{len(self._log)}")
            return self._log[v_from:v_to]

    def updates_since(self, v_from: int) -> list[PoolUpdate]:
        with self._lock:
            if not 0 <= v_from <= len(self._log):
                raise RangeError(f"v_from {v_from} outside 0..{len(self._log)}")
            return self._log[v_from:]

    # -- selection -----------------------------------------------------------

    def select_candidate(
        self,
        selector: Optional[Selector] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Artifact:
        """Pick the next parent artifact.

        Speculative entries are eligible only when the pool was built with
        ``speculative_selectable=True``; descendants of such a pick must carry
        speculative lineage (the pipeline's job).
        """
        with self._lock:
            eligible = [
                e
                for e in self._entries.values()
                if e.status is EntryStatus.CONFIRMED
                or (self.speculative_selectable and e.status is EntryStatus.SPECULATIVE)
            ]
            if not eligible:
                raise EmptyPool("no eligible entry to select from")
            chosen = (selector or best_score_selector)(eligible, rng)
            return chosen.artifact

    def entry_status(self, artifact_id: str) -> Optional[EntryStatus]:
        with self._lock:
            entry = self._entries.get(artifact_id)
            return entry.status if entry else None

    # -- checkpointing ---------------------------------------------------------

    def to_checkpoint(self) -> dict:
        """JSON-serializable snapshot: {version, entries, log}."""
        with self._lock:
            return {
                "version": len(self._log),
                "entries": [e.to_dict() for e in self._entries.values()],
                "log": [u.to_dict() for u in self._log],
            }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_checkpoint(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_checkpoint(cls, data: dict) -> "ArtifactPool":
        pool = cls()
        pool._log = [PoolUpdate.from_dict(u) for u in data["log"]]
        for ed in data["entries"]:
            artifact = Artifact.from_dict(ed["artifact"])
            entry = PoolEntry(
                artifact, ed["score"], EntryStatus(ed["status"]), ed["inserted_at_version"]
            )
            pool._entries[artifact.artifact_id] = entry
            if entry.status is EntryStatus.CONFIRMED:
                pool._best_score = max(pool._best_score, entry.score)
        if len(pool._log) != data["version"]:
            raise ValueError("checkpoint version disagrees with log length")
        return pool

    @classmethod
    def load(cls, path: str) -> "ArtifactPool":
        with open(path, encoding="utf-8") as fh:
            return cls.from_checkpoint(json.load(fh))


def confirmed_entries(pool: ArtifactPool) -> Iterable[PoolEntry]:
    with pool._lock:
        return [e for e in pool._entries.values() if e.status is EntryStatus.CONFIRMED]

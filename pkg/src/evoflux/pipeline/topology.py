"""Stage specifications, queue items, queues, and the loop topology."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional

from ..errors import ConfigError
from ..pool import ArtifactPool
from ..staleness import PolicyKind, StalenessPolicy

GENERATE = "generate"
PROPOSE = "propose"
EVALUATE = "evaluate"
REFLECT = "reflect"

HANDLER_IDS = (GENERATE, PROPOSE, EVALUATE, REFLECT, "custom")


@dataclass
class StageSpec:
    """A named processing stage with a bounded worker pool.

    fan_out is the number of backend sub-requests one item costs (minibatch
    or validation-set size); alpha_spec < 1 enables speculative release of
    partial results.
    """

    name: str
    handler_id: str
    k_init: int = 1
    k_min: int = 1
    k_max: int = 8
    alpha_spec: float = 1.0
    fan_out: int = 1

    def __post_init__(self) -> None:
        if self.handler_id not in HANDLER_IDS:
            raise ConfigError(f"unknown handler id {self.handler_id!r}")
        if not (1 <= self.k_min <= self.k_init <= self.k_max):
            raise ConfigError(
                f"stage {self.name}: need k_min <= k_init <= k_max, "
                f"got {self.k_min}/{self.k_init}/{self.k_max}"
            )
        if not 0 < self.alpha_spec <= 1:
            raise ConfigError(f"stage {self.name}: alpha_spec must be in (0, 1]")
        if self.fan_out < 1:
            raise ConfigError(f"stage {self.name}: fan_out must be positive")


@dataclass
class QueueItem:
    """A unit of stage work, tagged with freshness and speculative lineage.

    origin_version is the pool version read when the producing worker
    pushed the item; the staleness gate compares it with the pool version
    at consumption. spec_lineage holds ids of speculative artifacts the
    item transitively depends on; force_stale is set when one of them
    rolls back.
    """

    item_id: str
    stage: str  # destination stage
    payload: Any
    origin_version: int = 0
    spec_lineage: frozenset[str] = frozenset()
    tentative: bool = False
    created_at: float = 0.0
    produced_by: str = ""
    force_stale: bool = False
    tokens_spent: int = 0
    lineage_id: int = 0


class StageQueue:
    """FIFO item buffer; synchronization belongs to the driver."""

    def __init__(self, name: str, capacity: Optional[int] = None) -> None:
        if capacity is not None and capacity < 1:
            raise ConfigError("queue capacity must be positive when bounded")
        self.name = name
        self.capacity = capacity
        self.items: deque[QueueItem] = deque()

    def __len__(self) -> int:
        return len(self.items)

    def full(self) -> bool:
        return self.capacity is not None and len(self.items) >= self.capacity

    def push(self, item: QueueItem) -> None:
        if self.full():
            raise ConfigError(f"queue {self.name} over capacity")
        self.items.append(item)

    def try_pop(self) -> Optional[QueueItem]:
        return self.items.popleft() if self.items else None


@dataclass
class PipelineTopology:
    """Stages wired as the evolution loop, sharing one pool and policy."""

    stages: list[StageSpec]
    edges: dict[str, str]
    pool: ArtifactPool
    policy: StalenessPolicy
    queue_capacity: Optional[int] = None

    def __post_init__(self) -> None:
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate stage names")
        by_name = {s.name: s for s in self.stages}
        for required in (GENERATE, PROPOSE, EVALUATE):
            if required not in by_name:
                raise ConfigError(f"topology is missing the {required} stage")
        if self.edges.get(GENERATE) != PROPOSE or self.edges.get(PROPOSE) != EVALUATE:
            raise ConfigError("edges must form generate -> propose -> evaluate")
        for src, dst in self.edges.items():
            if src not in by_name or (dst not in by_name and dst != "pool"):
                raise ConfigError(f"edge {src}->{dst} references unknown stage")
        if self.policy.variant is PolicyKind.REFLECTIVE and REFLECT not in by_name:
            raise ConfigError("reflective policy requires a reflect stage")

    def stage(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)


def loop_topology(
    pool: ArtifactPool,
    policy: StalenessPolicy,
    *,
    mb: int,
    n_val: int,
    k_generate: int = 1,
    k_propose: int = 1,
    k_evaluate: int = 1,
    k_reflect: int = 1,
    k_max: int = 16,
    alpha_generate: float = 1.0,
    alpha_evaluate: float = 1.0,
    queue_capacity: Optional[int] = None,
) -> PipelineTopology:
    """The standard generate -> propose -> evaluate loop, plus a reflect
    stage when the policy calls for one."""
    stages = [
        StageSpec(GENERATE, GENERATE, k_init=k_generate, k_max=k_max,
                  alpha_spec=alpha_generate, fan_out=mb),
        StageSpec(PROPOSE, PROPOSE, k_init=k_propose, k_max=k_max, fan_out=1),
        StageSpec(EVALUATE, EVALUATE, k_init=k_evaluate, k_max=k_max,
                  alpha_spec=alpha_evaluate, fan_out=n_val),
    ]
    edges = {GENERATE: PROPOSE, PROPOSE: EVALUATE, EVALUATE: "pool"}
    if policy.variant is PolicyKind.REFLECTIVE:
        stages.append(StageSpec(REFLECT, REFLECT, k_init=k_reflect, k_max=k_max, fan_out=1))
    return PipelineTopology(stages, edges, pool, policy, queue_capacity=queue_capacity)

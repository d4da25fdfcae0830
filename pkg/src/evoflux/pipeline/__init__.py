from .topology import (
    GENERATE,
    PROPOSE,
    EVALUATE,
    REFLECT,
    PipelineTopology,
    QueueItem,
    StageQueue,
    StageSpec,
    loop_topology,
)
from .engine import Budget, Engine, RunMode, run_pipeline

__all__ = [
    "Budget",
    "Engine",
    "EVALUATE",
    "GENERATE",
    "PipelineTopology",
    "PROPOSE",
    "QueueItem",
    "REFLECT",
    "RunMode",
    "StageQueue",
    "StageSpec",
    "loop_topology",
    "run_pipeline",
]

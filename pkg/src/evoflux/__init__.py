"""evoflux: asynchronous orchestration for agent-evolution loops, with a
deterministic discrete-event harness for studying throughput and staleness
behavior at desk scale."""

from .backend import (
    BackendRequest,
    BackendResponse,
    HttpBackend,
    HttpBackendConfig,
    LengthDist,
    SimBackend,
    SimBackendConfig,
    average_concurrency,
    long_tail_preset,
)
from .config import ExperimentConfig, StageConfig, load_config
from .control import (
    RateWindow,
    ValidationTracker,
    adjust_workers,
    record_validation_outcome,
    reorder_validation,
)
from .metrics import (
    RunReport,
    TraceRecorder,
    compute_report,
    load_trace,
    normalized_evolution_rate,
)
from .pipeline import (
    Budget,
    Engine,
    PipelineTopology,
    QueueItem,
    StageQueue,
    StageSpec,
    loop_topology,
    run_pipeline,
)
from .pipeline.engine import ControlConfig, PipelineWorkload
from .pool import (
    Artifact,
    ArtifactKind,
    ArtifactPool,
    ConfirmOutcome,
    EntryStatus,
    PoolEntry,
    PoolUpdate,
    UpdateOp,
)
from .runner import ExperimentResult, run_experiment
from .sim import Completion, EventLoop, WallClock
from .speculation import (
    FanoutTracker,
    PartialScore,
    SpecGate,
    SpeculativeRelease,
    release_threshold,
    speculative_eval_gate,
)
from .staleness import (
    FORCED_GAP,
    Drop,
    GateDecision,
    GateOutcome,
    Keep,
    LlmReflector,
    MockReflector,
    PolicyKind,
    StalenessPolicy,
    gate,
    mock_reflector,
    version_gap,
)
from .workload import (
    SyntheticTask,
    TaskConfig,
    TaskRuntime,
    TaskSample,
    run_sync_reference,
    seed_pool,
)

__version__ = "0.1.0"

"""Exception hierarchy shared across the package."""


class EvofluxError(Exception):
    """Base class for all evoflux errors."""


class DuplicateArtifact(EvofluxError):
    """An artifact with the same id is already in the pool."""


class GateFailed(EvofluxError):
    """A speculative insert was attempted without beating the pool best."""


class NotSpeculative(EvofluxError):
    """Confirm/rollback was requested for an entry that is not speculative."""


class RangeError(EvofluxError):
    """A version range query violated 0 <= v_from <= v_to <= pool.version."""


class EmptyPool(EvofluxError):
    """Candidate selection was attempted on a pool with no eligible entry."""


class ConfigError(EvofluxError):
    """Invalid topology, stage spec, or experiment configuration."""


class BoundsError(EvofluxError):
    """A worker-count change fell outside [k_min, k_max]."""


class HandlerError(EvofluxError):
    """A stage handler raised while processing an item."""


class InvariantViolation(EvofluxError):
    """Internal consistency check failed (e.g. item newer than the pool)."""


class FormatError(EvofluxError):
    """A payload handed to the mock reflector is not a structured edit set."""


class ReflectorError(EvofluxError):
    """A reflector failed; the affected item is discarded and counted."""


class UnknownSample(EvofluxError):
    """A validation outcome was recorded for an unregistered sample."""


class BackendUnavailable(EvofluxError):
    """The backend rejected or could not serve a request."""


class BackendTimeout(BackendUnavailable):
    """An HTTP backend call exceeded its configured timeout."""


class MalformedTrace(EvofluxError):
    """An event trace is missing fields or contains unknown event kinds."""


class UndefinedBaseline(EvofluxError):
    """Normalized evolution rate is undefined: the baseline did not improve."""

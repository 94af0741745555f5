"""Exception hierarchy shared by all pipeline stages."""

from __future__ import annotations


class OGInfraError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(OGInfraError, ValueError):
    """Invalid configuration or parameters supplied by the user."""


class InputError(OGInfraError, ValueError):
    """Invalid arguments to a pure computation (metrics, losses)."""


class SchemaError(OGInfraError):
    """A CSV header is missing or does not name the required columns."""


class IngestIOError(OGInfraError, OSError):
    """An input file could not be opened or read."""


class ConsistencyError(OGInfraError):
    """Records disagree with the run they were supplied in."""


class CatalogError(OGInfraError):
    """A persisted site catalog line could not be decoded."""


class FetchError(OGInfraError):
    """Base class for imagery retrieval failures."""


class AuthError(FetchError):
    """The imagery endpoint rejected our credentials (401/403)."""


class TransientFetchError(FetchError):
    """Retries were exhausted on 429/5xx/timeout responses."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class ProtocolError(FetchError):
    """The endpoint answered 200 but the body is not a PNG."""


class BatchFetchError(FetchError):
    """Every site in a batch failed; ``failures`` maps site_id to its error."""

    def __init__(self, message: str, failures: dict):
        super().__init__(message)
        self.failures = failures


class ShapeError(OGInfraError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class UsageError(OGInfraError, RuntimeError):
    """An API was called out of order, e.g. backward before forward."""


class TrainingError(OGInfraError):
    """Training diverged; ``last_stats`` holds the last finite epoch stats."""

    def __init__(self, message: str, last_stats=None):
        super().__init__(message)
        self.last_stats = last_stats


class PreconditionError(OGInfraError):
    """A pipeline stage is missing an artifact produced by an earlier stage."""

"""Error types raised across the pretraining, evaluation and reporting services."""

from typing import Any, Optional


class AffineSSLError(Exception):
    """Base class for every error raised by this package."""

    error_code = "AFFINE_SSL_ERROR"


class ConfigurationError(AffineSSLError):
    """Invalid configuration: bad intervals, empty masks, unknown ids, schema violations."""

    error_code = "CONFIGURATION_ERROR"


class ContractError(AffineSSLError):
    """A precondition on shapes or value ranges was violated by the caller."""

    error_code = "CONTRACT_ERROR"


class NumericError(AffineSSLError):
    """A computation became singular, degenerate or non-finite."""

    error_code = "NUMERIC_ERROR"


class IngestionError(AffineSSLError):
    """Dataset files are missing or unreadable."""

    error_code = "INGESTION_ERROR"

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class TrainingDivergedError(NumericError):
    """The combined loss became non-finite; carries the diagnostic metrics record."""

    error_code = "TRAINING_DIVERGED"

    def __init__(self, message: str, record: Any = None):
        super().__init__(message)
        self.record = record


# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_RUN_FAILURE = 4


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code family it belongs to."""
    if isinstance(error, ConfigurationError):
        return EXIT_CONFIG_ERROR
    if isinstance(error, IngestionError):
        return EXIT_DATA_ERROR
    return EXIT_RUN_FAILURE

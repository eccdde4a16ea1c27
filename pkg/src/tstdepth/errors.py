"""Exception hierarchy. CLI exit codes map onto these classes."""


class TSTError(Exception):
    exit_code = 1


class ConfigError(TSTError, ValueError):
    """Bad shapes, incompatible hyperparameters, malformed config."""

    exit_code = 1


class UsageError(TSTError, ValueError):
    exit_code = 1


class FormatError(TSTError):
    """Unreadable or truncated file."""

    exit_code = 2


class EvaluationError(TSTError, ValueError):
    """Nothing left to evaluate (empty mask, empty dataset)."""

    exit_code = 2


class DomainError(TSTError, ValueError):
    exit_code = 3


class NumericalError(TSTError, FloatingPointError):
    """NaN/Inf encountered during forward or training."""

    exit_code = 3

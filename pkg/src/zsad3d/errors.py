"""Exception hierarchy shared across the package.

Each class carries the process exit code the CLI reports for it.
"""


class ZsadError(Exception):
    exit_code = 1


class ConfigurationError(ZsadError, ValueError):
    exit_code = 2


class ProtocolViolation(ZsadError):
    """Raised when train and test categories overlap."""

    exit_code = 3


class NumericFailure(ZsadError, ArithmeticError):
    exit_code = 4


class ScoringError(NumericFailure):
    """Similarity undefined, e.g. a zero-norm feature vector."""


class UndefinedMetricError(NumericFailure):
    """Metric undefined for the given labels (e.g. a single class)."""


class DefectRejected(ZsadError):
    """The requested defect region captured no points; retry with a new center."""

"""Exception hierarchy.

Validation problems (bad input, violated preconditions) derive from
``ValidationError`` and map to exit code 1; failures of the numerical
machinery derive from ``RuntimeFailure`` and map to exit code 2.
"""
from __future__ import annotations


class ThermopoolError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 2


class ValidationError(ThermopoolError, ValueError):
    exit_code = 1


class RuntimeFailure(ThermopoolError, RuntimeError):
    exit_code = 2


# gridio
class MalformedRow(ValidationError):
    pass


class DuplicateRecord(ValidationError):
    pass


class OutOfRangeTemperature(ValidationError):
    pass


class AlignmentError(ValidationError):
    """Raised when an alignment report carries fatal entries."""


# exposure
class InvalidWidth(ValidationError):
    pass


class InvertedRange(ValidationError):
    pass


class ZeroPopulation(ValidationError):
    pass


class NoRetainedHours(ValidationError):
    pass


class YearNotCovered(ValidationError):
    pass


# panel
class NonPositiveValue(ValidationError):
    pass


class EmptyPanel(ValidationError):
    pass


class RankWarning(UserWarning):
    """A retained design column carries no usable variation."""


# inference / diagnostics / report
class InvalidCholesky(ValidationError):
    pass


class ZeroVariance(ValidationError):
    pass


class MismatchedObservations(ValidationError):
    pass


class NonStationary(ValidationError):
    pass


class EmptyDraws(ValidationError):
    pass


class WindowTooWide(ValidationError):
    pass


# twfe
class TooFewClusters(ValidationError):
    pass


class RankDeficient(ValidationError):
    pass


# cli
class UnknownSubcommand(ValidationError):
    pass


class MissingFlag(ValidationError):
    pass


class AdaptationFailed(RuntimeFailure):
    pass


class AllRatiosDegenerate(RuntimeFailure):
    pass

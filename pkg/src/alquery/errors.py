"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit with 2,
data/format/I-O problems with 1.
"""


class AlqueryError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AlqueryError, ValueError):
    """Invalid parameters, strategy settings or missing required inputs."""


class DataError(AlqueryError, ValueError):
    """Input data violates a content precondition (e.g. non-finite values)."""


class InsufficientDataError(DataError):
    """Too few samples for the requested estimate."""


class ShapeError(AlqueryError, ValueError):
    """Array dimensions disagree."""


class FormatError(AlqueryError, ValueError):
    """A file or byte stream is malformed."""


class StateError(AlqueryError, RuntimeError):
    """An operation would break the annotation-state invariants."""


class NumericError(AlqueryError, ArithmeticError):
    """A quantity is numerically undefined for the given input."""

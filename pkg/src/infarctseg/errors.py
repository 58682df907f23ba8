"""Exception hierarchy.

The CLI maps families to exit codes: ``ConfigurationError`` -> 1,
``DataError`` (and subclasses) -> 2, anything else -> 3.
"""


class InfarctSegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(InfarctSegError, ValueError):
    pass


class SpecError(ConfigurationError):
    """Invalid phantom specification."""


class ContractError(ConfigurationError):
    """A precondition of an operation was violated by the caller."""


class DataError(InfarctSegError):
    pass


class FormatError(DataError):
    pass


class UnsupportedError(DataError):
    pass


class SchemaError(DataError):
    pass


class ShapeError(DataError, ValueError):
    pass


class BoundsError(DataError, IndexError):
    pass


class AggregationError(DataError):
    pass


class DivergenceError(InfarctSegError, FloatingPointError):
    """Raised when training produces non-finite gradients or losses."""


class LockError(InfarctSegError):
    """Another process holds the artifact directory lock."""

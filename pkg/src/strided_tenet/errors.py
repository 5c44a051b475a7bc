"""Exception types shared across the package.

Each class doubles as a category for CLI exit codes: shape/domain/capacity/
format problems are data errors, NumericError is a numeric failure.
"""


class StridedTenetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(StridedTenetError, ValueError):
    """Array shapes that do not line up (mismatched extents, bad dims)."""


class DomainError(StridedTenetError, ValueError):
    """Input values outside their documented domain."""


class CapacityError(StridedTenetError, ValueError):
    """A materialization guard was exceeded (tensor would be too large)."""


class NumericError(StridedTenetError, ArithmeticError):
    """Non-finite values or magnitude overflow during evaluation."""

    def __init__(self, message, site=None):
        super().__init__(message)
        self.site = site


class StateError(StridedTenetError, RuntimeError):
    """Objects that do not belong together were used together."""


class FormatError(StridedTenetError, ValueError):
    """Unreadable, unsupported, or wrong-version file content."""


class UndefinedMetricError(StridedTenetError, ValueError):
    """The requested metric has no defined value for these inputs."""

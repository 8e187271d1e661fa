"""Exception types raised across the package."""


class StqmleError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(StqmleError, ValueError):
    pass


class SymmetryError(StqmleError, ValueError):
    """A matrix expected to be symmetric is not."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class NotPositiveDefinite(StqmleError, ArithmeticError):
    """Non-positive pivot met during a Cholesky factorization."""

    def __init__(self, pivot, value=None):
        super().__init__(f"non-positive pivot at index {pivot} (value {value!r})")
        self.pivot = pivot
        self.value = value


class NoConvergence(StqmleError, RuntimeError):
    """Iterative eigensolver ran out of restarts."""

    def __init__(self, message, estimates=None, residuals=None):
        super().__init__(message)
        self.estimates = estimates
        self.residuals = residuals


class InfeasibleTheta(StqmleError, ValueError):
    def __init__(self, message, violated=()):
        super().__init__(message)
        self.violated = tuple(violated)


class NonfiniteValue(StqmleError, ArithmeticError):
    pass


class SingularDesign(StqmleError, ArithmeticError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class GuardExceeded(StqmleError, ValueError):
    """Dense oracle asked to handle a problem that is too large."""


class TooFewBlocks(StqmleError, ValueError):
    pass


class NoAscent(StqmleError, ArithmeticError):
    pass


class InfeasibleStart(InfeasibleTheta):
    pass


class MaxItersExceeded(StqmleError, RuntimeError):
    pass


class InputError(StqmleError, ValueError):
    """Malformed input file; ``line`` and ``column`` are 1-based when known."""

    def __init__(self, message, path=None, line=None, column=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
                if column is not None:
                    where += f":{column}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line
        self.column = column


class ConfigError(StqmleError, ValueError):
    """Invalid run configuration (unknown key, bad value, impossible design)."""

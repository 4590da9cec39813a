"""Exception types shared across the package."""


class TruncLabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TruncLabError, ValueError):
    """Shapes, sizes or hyperparameters are inconsistent."""


class NumericalOverflowError(TruncLabError, FloatingPointError):
    """A NaN or Inf appeared in a state, gradient or parameter.

    Attributes:
        context: free-form dict describing where it happened (time step,
            parameter block, iteration, ...).
    """

    def __init__(self, message, **context):
        self.context = context
        if context:
            detail = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class SizeGuardError(TruncLabError, ValueError):
    """An oracle-scale routine was asked to handle a problem too large for it."""


class DecompositionError(TruncLabError, ValueError):
    """Gradient decomposition is undefined (zero reference gradient) or
    its preconditions do not hold."""


class IngestionError(TruncLabError, ValueError):
    """A data file is malformed. ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} [{', '.join(where)}]"
        super().__init__(message)

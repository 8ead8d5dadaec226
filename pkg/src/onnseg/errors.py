"""Exception hierarchy shared across the package."""


class OnnSegError(Exception):
    """Base class for all package errors."""


class DimensionError(OnnSegError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(OnnSegError, ValueError):
    """A documented precondition on values (not shapes) was violated."""


class ConfigurationError(OnnSegError, ValueError):
    pass


class DegenerateStatisticsError(OnnSegError, ValueError):
    """Batch statistics requested over fewer than two elements."""


class DeterminismError(OnnSegError, RuntimeError):
    pass


class ValidationError(OnnSegError, ValueError):
    pass


class LeakageError(OnnSegError):
    """An evaluation patient also appears in the training set."""

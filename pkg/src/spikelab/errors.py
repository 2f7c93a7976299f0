"""Shared exception types."""


class NumericsError(RuntimeError):
    """An operation produced NaN/Inf or training diverged."""


class PreconditionError(ValueError):
    """A pipeline stage was invoked with inputs that violate its contract."""

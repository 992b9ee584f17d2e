"""Shared exception types."""


class InvalidInput(ValueError):
    """Input violates a documented precondition (shape, finiteness, range)."""


class NumericalFailure(RuntimeError):
    """An iterative numerical routine did not converge within its cap."""


class DegenerateInput(ValueError):
    """Input is degenerate for the requested operation (e.g. all-zero spectrum)."""


class InvalidConfig(ValueError):
    """Configuration value or combination is not usable."""


class UndeterminedLabel(RuntimeError):
    """Label cannot be inferred from the given gradients."""

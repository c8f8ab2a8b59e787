class ValidationError(ValueError):
    """Input data or configuration violates a documented contract."""


class DivergenceError(FloatingPointError):
    """A non-finite value appeared during numeric computation."""

"""Single-pass multi-task detection of sleep stages, arousals and respiratory events."""
from .errors import DivergenceError, ValidationError

__version__ = "0.1.0"

__all__ = ["DivergenceError", "ValidationError", "__version__"]

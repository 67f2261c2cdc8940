"""Exception types shared across the package."""


class HisaError(Exception):
    """Base class for all package errors."""


class ShapeError(HisaError, ValueError):
    """Raised when operand shapes are incompatible."""


class NumericalError(HisaError, ArithmeticError):
    """Raised when a NaN or Inf appears where finite values are required."""


class VocabularyError(HisaError, ValueError):
    """Raised on token ids outside the vocabulary."""


class CorpusError(HisaError, ValueError):
    """Raised on malformed corpus input; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(HisaError, ValueError):
    """Raised on unknown or ill-typed configuration keys."""


class MaskError(HisaError, ValueError):
    """Raised when an attention mask leaves a query row with no visible key."""

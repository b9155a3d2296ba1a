"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the declared layer geometry."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values, or diverged."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class TraceFormatError(ValueError):
    """A trace file violates the expected on-disk format."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line

"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ShapeError(DimensionError):
    """A tensor does not have the rank or extent an operation requires."""


class ParameterError(ValueError):
    """A scalar argument lies outside its allowed domain."""


class ValidationError(ValueError):
    """Inputs violate a documented precondition."""


class PolicyError(RuntimeError):
    """A training-policy rule was broken (e.g. a teacher written at the wrong time)."""


class FormatError(ValueError):
    """A file on disk does not match its binary or text format."""


class ConfigError(ValidationError):
    """Experiment configuration could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)

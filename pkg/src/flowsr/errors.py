"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class FlowSRError(Exception):
    """Base class for all errors raised by flowsr."""


class ValidationError(FlowSRError, ValueError):
    """Input failed a precondition (shape, range, file format, config)."""


class DimensionError(ValidationError):
    pass


class InfeasibleError(FlowSRError):
    """A sampling request cannot be satisfied (e.g. no patch passes the fluid threshold)."""


class ConfigError(ValidationError):
    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(FlowSRError, ArithmeticError):
    """NaN or Inf detected in a result that must be finite."""

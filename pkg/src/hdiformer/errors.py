"""Exception hierarchy shared by every subpackage."""


class HDIError(Exception):
    """Base class for all package errors."""


class ConfigError(HDIError, ValueError):
    """Invalid configuration or model/branch wiring."""


class ParameterError(HDIError, ValueError):
    """A scalar parameter is outside its domain."""


class ShapeError(HDIError, ValueError):
    """Tensor shapes are incompatible."""


class DomainError(HDIError, ValueError):
    """Values outside the admissible set (e.g. non-binary spikes)."""


class NumericError(HDIError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class StateError(HDIError, RuntimeError):
    """An object is used before it has the state the call needs."""


class DeterminismError(HDIError, RuntimeError):
    """A function expected to be deterministic returned differing values."""


class ParseError(HDIError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class OrderingError(ParseError):
    """Event timestamps go backwards."""


class VersionError(HDIError, ValueError):
    """Checkpoint format or config does not match what the reader expects."""


class TrainingError(HDIError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ReportingError(HDIError, ValueError):
    """Energy report inputs are incomplete."""

"""Exception hierarchy. CLI exit codes are attached to each class."""


class FetrackError(Exception):
    exit_code = 1


class DimensionError(FetrackError, ValueError):
    exit_code = 1


class DomainError(FetrackError, ValueError):
    exit_code = 1


class ConfigError(FetrackError, ValueError):
    exit_code = 1


class NumericError(FetrackError, ArithmeticError):
    """Raised when a NaN or Inf shows up in an intermediate result."""

    exit_code = 3

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DataIOError(FetrackError, OSError):
    exit_code = 2

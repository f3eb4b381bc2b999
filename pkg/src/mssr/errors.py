"""Exception types shared across the package.

Each class carries the CLI exit code it maps to.
"""


class MSSRError(Exception):
    exit_code = 1


class ConfigError(MSSRError, ValueError):
    exit_code = 2


class SizingError(MSSRError, ValueError):
    exit_code = 2


class ShapeError(MSSRError, ValueError):
    exit_code = 2


class MissingInputError(MSSRError, FileNotFoundError):
    exit_code = 3


class LoadError(MissingInputError):
    """Raised with the full list of files that failed to decode."""

    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("could not decode: " + ", ".join(self.paths))


class NumericError(MSSRError, FloatingPointError):
    exit_code = 4


class DivergenceError(NumericError):
    def __init__(self, message, step=None, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


class StaleArtifactError(MSSRError):
    exit_code = 5


class InvariantViolation(MSSRError, RuntimeError):
    exit_code = 1

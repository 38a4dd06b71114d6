"""Exception types shared across the package."""


class CldistillError(Exception):
    """Base class for all package errors."""


class ShapeError(CldistillError, ValueError):
    """Operand shapes do not conform."""


class UsageError(CldistillError, RuntimeError):
    """An API was called in a state that does not allow it."""


class NonFiniteError(CldistillError, FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class PoolLimitError(CldistillError, ValueError):
    """Full enumeration of a task pool was refused because it is too large."""


class FormatError(CldistillError, ValueError):
    """A binary file does not match its declared layout."""


class ConfigError(CldistillError, ValueError):
    """Invalid experiment configuration.

    ``problems`` holds one human-readable line per violation.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))

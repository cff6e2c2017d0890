"""Exception hierarchy shared by all modules.

The CLI maps each class to a distinct exit status.
"""


class RwreError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 5


class ValidationError(RwreError, ValueError):
    """Invalid input values (bad probability vector, velocity outside the ball, ...)."""

    exit_code = 2


class ConfigError(ValidationError):
    """Configuration file or flag violations.

    Carries every violation found, not just the first one.
    """

    exit_code = 2

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ResourceError(RwreError):
    """A computation would exceed a configured enumeration or memory limit."""

    exit_code = 3


class ConvergenceError(RwreError):
    """An iterative solver or a restart loop failed to terminate successfully."""

    exit_code = 4

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual

"""Exception types raised across the package."""


class RegistrationError(Exception):
    """Base class for package errors."""


class ShapeError(RegistrationError, ValueError):
    """Input arrays have incompatible dimensions."""


class ConfigError(RegistrationError, ValueError):
    """An invalid parameter or configuration value."""


class FormatError(RegistrationError, ValueError):
    """A file header disagrees with its payload."""


class DataError(RegistrationError, ValueError):
    """Non-finite or otherwise unusable voxel data."""


class DivergenceError(RegistrationError, ArithmeticError):
    """An optimizer produced a non-finite loss.

    ``state`` holds whatever the caller last had in a finite condition
    (for registration: the displacement field and translator).
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state

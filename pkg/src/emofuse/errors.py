"""Exception types shared across the package."""


class EmofuseError(Exception):
    """Base class for all package errors."""


class ShapeError(EmofuseError, ValueError):
    pass


class NumericalError(EmofuseError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class FixtureError(EmofuseError, ValueError):
    pass


class ConfigError(EmofuseError, ValueError):
    pass


class CheckpointError(EmofuseError, ValueError):
    pass

class MHTNError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class ConfigurationError(MHTNError, ValueError):
    """Invalid configuration, shapes, or arguments."""

    exit_code = 1


class DataError(MHTNError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 1


class NumericalError(MHTNError, ArithmeticError):
    """A loss or parameter became non-finite."""


class CheckpointError(MHTNError):
    """Checkpoint cannot be read or does not match the active configuration."""

    exit_code = 1

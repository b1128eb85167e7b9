"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration/input/protocol problems
exit with 2, numerical failures with 3, I/O failures with 4.
"""


class YganError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(YganError):
    """Invalid configuration value or unsupported option combination."""


class InputError(YganError):
    """Runtime input (tensor shape, label range, ...) violates a precondition."""


class ProtocolError(YganError):
    """Experimental-protocol violation (batch too small, empty dataset, ...)."""


class IngestionError(YganError):
    """A dataset file could not be read or parsed."""


class CheckpointError(YganError):
    """A checkpoint file is missing, corrupt, or incompatible."""


class NumericalError(YganError):
    """A loss or parameter became non-finite during training."""

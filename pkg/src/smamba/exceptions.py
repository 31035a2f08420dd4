"""Exception hierarchy shared by every module."""


class SMambaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SMambaError, ValueError):
    """Array extents do not fit the operation or configuration."""


class ContractError(SMambaError, ValueError):
    """A documented precondition was violated."""


class TapeStateError(SMambaError, RuntimeError):
    """A gradient tape was used after it was consumed, or before recording."""


class ComputationError(SMambaError, ArithmeticError):
    """A computation produced NaN or infinite values."""


class LoadError(SMambaError, ValueError):
    """An input file could not be parsed."""


class ProtocolError(SMambaError, ValueError):
    """An experimental protocol cannot be satisfied by the data."""


class DivergenceError(SMambaError, ArithmeticError):
    """Training produced a non-finite loss or gradient.

    ``report`` carries the training report up to the last finite epoch.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(SMambaError, ValueError):
    """A run configuration is invalid."""


class ArtifactMismatchError(SMambaError, ValueError):
    """A checkpoint does not fit the data or configuration it is used with."""

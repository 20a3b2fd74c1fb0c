"""Exception hierarchy shared across cleannet modules."""


class CleanNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CleanNetError, ValueError):
    pass


class DegenerateInputError(CleanNetError, ValueError):
    """Input for which the requested quantity is undefined (e.g. a zero vector in a cosine)."""


class NonFiniteError(DegenerateInputError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(CleanNetError, ValueError):
    pass


class TrainingDivergenceError(CleanNetError, FloatingPointError):
    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


class ValidationError(CleanNetError, ValueError):
    pass


class ConfigurationError(CleanNetError, ValueError):
    pass


class FormatError(CleanNetError, ValueError):
    """Malformed file. ``offset`` is the byte offset (binary files) or line number (text files)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointVersionError(FormatError):
    pass


class UnknownClassError(CleanNetError, KeyError):
    pass

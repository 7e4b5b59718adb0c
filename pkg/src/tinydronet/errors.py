"""Exception hierarchy shared by every module."""


class TinyDronetError(Exception):
    """Base class for all errors raised by this package."""


class ModelError(TinyDronetError, ValueError):
    """Invalid graph, family configuration or transform request."""


class ShapeError(ModelError):
    """Shape inference failed (mismatched Add, non-positive dimension, ...)."""


class FormatError(TinyDronetError, ValueError):
    """A file could not be decoded: bad magic, version, checksum or content."""


class NumericError(TinyDronetError, ArithmeticError):
    """Non-finite values appeared during a computation."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch

"""Exception types shared across the package."""


class StreamASRError(Exception):
    """Base class for all errors raised by this package."""


class InvalidMaskError(StreamASRError, ValueError):
    pass


class UnsupportedMaskError(StreamASRError, ValueError):
    pass


class ShapeError(StreamASRError, ValueError):
    pass


class ConfigError(StreamASRError, ValueError):
    pass


class CapacityError(StreamASRError, RuntimeError):
    pass


class StaleCacheError(StreamASRError, RuntimeError):
    pass


class InvalidTensorError(StreamASRError, ValueError):
    pass


class FormatError(StreamASRError, ValueError):
    """A binary container or its contents failed validation."""


class UndefinedWERError(StreamASRError, ValueError):
    pass


class TranscriberError(StreamASRError, RuntimeError):
    pass

"""Exception hierarchy shared by the library and the command line."""


class FGINetError(Exception):
    """Base class for all errors raised by :mod:`fginet`."""


class ConfigError(FGINetError, ValueError):
    """An architectural or hyper-parameter configuration is inconsistent."""


class UsageError(FGINetError, ValueError):
    """A function was called with arguments outside its contract."""


class DataError(FGINetError, OSError):
    """A dataset, manifest or image file could not be read."""


class FormatError(DataError):
    """A binary file (checkpoint, raw image blob) is corrupt or truncated."""


class NumericError(FGINetError, ArithmeticError):
    """Non-finite values appeared during a forward or backward pass."""

"""Exception hierarchy shared by every module."""


class LogocapError(Exception):
    """Base class for all library errors."""


class TensorFormatError(LogocapError, ValueError):
    """Malformed binary tensor file."""


class HeaderError(TensorFormatError):
    pass


class PayloadLengthError(TensorFormatError):
    pass


class NonFiniteError(LogocapError, ValueError):
    pass


class ParseError(LogocapError, ValueError):
    pass


class ShapeError(LogocapError, ValueError):
    pass


class NoGroundTruthError(LogocapError, ValueError):
    pass


class UnmatchedInstanceError(LogocapError, ValueError):
    pass


class MissingCacheError(LogocapError, RuntimeError):
    pass


class NumericalError(LogocapError, FloatingPointError):
    pass

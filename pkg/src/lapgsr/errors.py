"""Exception types shared across the package."""


class LapGSRError(Exception):
    """Base class for all errors raised by lapgsr."""


class ShapeError(LapGSRError, ValueError):
    """Raised when tensor or image extents are incompatible.

    ``expected`` and ``got`` carry the offending extents so callers can
    report both sides without parsing the message.
    """

    def __init__(self, message, expected=None, got=None):
        super().__init__(message)
        self.expected = expected
        self.got = got


class NonFiniteError(LapGSRError, FloatingPointError):
    """Raised when a NaN or infinity shows up where it must not."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class DataError(LapGSRError):
    """Raised for malformed datasets, image files and checkpoints."""

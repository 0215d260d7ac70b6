"""Exception hierarchy shared by every module.

The CLI maps the three top-level families onto exit codes
(config -> 1, data -> 2, numeric -> 3).
"""


class TnalignError(Exception):
    """Base class for all package errors."""


class ConfigError(TnalignError, ValueError):
    """Invalid configuration, arguments or spec."""


class DimensionError(ConfigError):
    """Shape or length mismatch between arrays that must agree."""


class DegenerateError(TnalignError, ValueError):
    """Input is well formed but mathematically degenerate (zero denominator, collinear basis)."""


class NumericError(TnalignError, ArithmeticError):
    """Non-finite values appeared during a forward pass."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class DivergenceError(NumericError):
    """Training loss became NaN/Inf; carries the epoch index."""

    def __init__(self, message, epoch=None, layer=None):
        super().__init__(message, layer=layer)
        self.epoch = epoch


class DataError(TnalignError):
    """Problems reading or fetching datasets."""


class IdxFormatError(DataError, ValueError):
    """Base for malformed IDX payloads."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class TrailingBytesError(IdxFormatError):
    pass


class CifarFormatError(DataError, ValueError):
    """CIFAR-10 binary length is not a multiple of the record size."""


class CifarLabelError(DataError, ValueError):
    """CIFAR-10 record label outside 0..9."""


class ChecksumError(DataError):
    """Downloaded bytes did not match the pinned SHA-256."""

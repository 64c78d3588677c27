"""Exception hierarchy.

The CLI maps the three top-level families onto exit codes: configuration
problems exit 2, data problems exit 3 and numeric problems exit 4.
"""

from __future__ import annotations


class TGDError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(TGDError, ValueError):
    """Invalid or inconsistent configuration."""


class ParameterError(ConfigError):
    """A parameter is outside its valid domain."""


class DataError(TGDError, ValueError):
    """Input data violates a contract."""


class FormatError(DataError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncationError(FormatError):
    """A binary file ends before its declared content."""


class AlignmentError(DataError):
    """Raw and persistence-image records do not describe the same samples."""


class CheckpointError(DataError):
    """A checkpoint does not match the network it is loaded into."""


class NumericError(TGDError, ArithmeticError):
    """Shape or numeric contract violated inside a computation."""


class DimensionError(NumericError, ValueError):
    """Array shapes are incompatible."""


class ChannelError(DimensionError):
    """Wrong number of image channels."""


class BatchSizeError(DimensionError):
    """Batch too small for the requested operation."""


class PairingError(DimensionError):
    """Lists of paired layers have different lengths."""


class ContractError(NumericError):
    """An operation was called outside its precondition."""

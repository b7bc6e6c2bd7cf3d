"""Exception hierarchy.

Errors fall into two families that the command line maps to distinct exit
codes: usage errors (bad invocation) and data/config errors (bad inputs).
"""


class LagaError(Exception):
    """Base class for all package errors."""


class UsageError(LagaError):
    pass


class ConfigError(LagaError, ValueError):
    pass


class ShapeError(LagaError, ValueError):
    pass


class NumericInputError(LagaError, ValueError):
    pass


class DataError(LagaError):
    pass


class SamplingError(DataError):
    pass


class ManifestError(DataError):
    pass


class FormatError(DataError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(DataError):
    pass


class TrainingError(DataError):
    pass

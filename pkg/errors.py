"""Exception hierarchy shared by every DenseSteer module."""
from typing import Optional


class DenseSteerError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ConfigError(DenseSteerError):
    """Invalid model, rewriter or run configuration."""


class EmptyTrace(DenseSteerError):
    """A trace has no content where content is required."""


class DomainError(DenseSteerError):
    """An argument lies outside the domain of the operation."""


class InsufficientData(DenseSteerError):
    """Too few records for the requested statistic."""


class LengthError(DenseSteerError):
    """A sequence does not fit the model context."""


class ShapeError(DenseSteerError):
    """A vector or tensor has the wrong shape for the model."""


class FormatError(DenseSteerError):
    """A binary container or record is malformed."""


class ChecksumError(FormatError):
    """Declared sizes or digests disagree with the file contents."""


class VersionError(FormatError):
    """Unknown container format version."""


class EmptySet(DenseSteerError):
    """An aggregate was requested over no elements."""


class FingerprintMismatch(DenseSteerError):
    """A steering vector was extracted from different weights."""


class NetworkError(DenseSteerError):
    """The rewriter endpoint could not be reached after retries."""


class EmptyResponse(DenseSteerError):
    """The rewriter returned blank text."""


class CacheMiss(DenseSteerError):
    """Offline mode and no cached rewriter response exists."""


class InsufficientPairs(DenseSteerError):
    """Exclusions exhausted the question pool before n_pairs was reached."""


class MissingGold(DenseSteerError):
    """A dataset record has no gold answer."""


class EmptyGrid(DenseSteerError):
    """A sweep was requested over an empty layer or lambda grid."""


class ParseError(DenseSteerError):
    """A dataset or trace line could not be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)

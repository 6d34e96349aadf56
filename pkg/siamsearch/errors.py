"""
Exception hierarchy for siamsearch.

Every error derives from SiamSearchError and from the closest builtin, so
callers may catch either.
"""

from typing import Any


class SiamSearchError(Exception):
    """Base class for all siamsearch errors."""


class ShapeError(SiamSearchError, ValueError):
    """Tensor shapes do not conform."""

    def __init__(self, message: str, *shapes: tuple[int, ...]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class DegenerateBatchError(SiamSearchError, ValueError):
    """Batch statistics requested on a batch of one."""


class ZeroNormError(SiamSearchError, ValueError):
    """A row with zero L2 norm reached a cosine similarity."""


class NonFiniteError(SiamSearchError, FloatingPointError):
    """NaN or infinite values where finite ones are required."""


class RankError(SiamSearchError, ValueError):
    """Backward called on a non-scalar tensor."""


class RangeError(SiamSearchError, ValueError):
    """Argument outside its admissible range."""


class ConfigError(SiamSearchError, ValueError):
    """Invalid or unknown configuration entry."""


class DatasetFormatError(SiamSearchError, ValueError):
    """Dataset file does not follow the expected layout."""


class CorruptRecordError(DatasetFormatError):
    """A single dataset record holds an impossible value."""


class GenotypeError(SiamSearchError, ValueError):
    """Genotype inconsistent with its search space or target dimensions."""


class InsufficientNegativesError(SiamSearchError, ValueError):
    """Contrastive batch too small to provide negatives."""


class CheckpointError(SiamSearchError, ValueError):
    """Checkpoint container is unreadable or mismatched."""


class CorruptedSearchError(SiamSearchError, FloatingPointError):
    """Search produced a non-finite loss or architecture weight."""

    def __init__(self, message: str, diagnostic: dict[str, Any] | None = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}

"""Custom exceptions for MCF Fusion."""

from typing import Any, Optional


class McfError(Exception):
    """Base exception for MCF Fusion."""

    def __init__(self, message: str, details: Optional[dict[str, Any]] = None):
        self.message = message
        self.details = details or {}
        super().__init__(self.message)


class ConfigurationError(McfError):
    """Raised when a run configuration or preset is invalid."""
    pass


class DimensionError(McfError):
    """Raised when tensor shapes do not agree."""

    def __init__(self, message: str, *shapes: tuple[int, ...]):
        super().__init__(message, {"shapes": [list(s) for s in shapes]})


class InvalidMaskError(McfError):
    """Raised when a mask leaves no valid position."""
    pass


class ParameterError(McfError):
    """Raised when a numeric argument is outside its documented range."""
    pass


class EvaluationError(McfError):
    """Raised when a function under gradient check is not finite."""
    pass


class UsageError(McfError):
    """Raised when an API is called out of order (e.g. step before backward)."""
    pass


class LabelError(McfError):
    """Raised when targets are malformed (non-binary, out of range)."""
    pass


class DataError(McfError):
    """Base for feature-bundle and dataset errors."""
    pass


class BadMagicError(DataError):
    """Raised when a bundle does not start with the MCFB magic."""
    pass


class UnsupportedVersionError(DataError):
    """Raised when a bundle declares an unknown format version."""
    pass


class TruncatedBundleError(DataError):
    """Raised when a bundle ends before its declared records."""

    def __init__(self, message: str, sample_index: int, details: Optional[dict[str, Any]] = None):
        self.sample_index = sample_index
        super().__init__(message, {"sample_index": sample_index, **(details or {})})


class BundleSizeError(DataError):
    """Raised when a bundle is longer than its header declares."""
    pass


class RecordError(DataError):
    """Raised when a record violates the format invariants."""

    def __init__(self, message: str, field: str, sample_index: Optional[int] = None):
        self.field = field
        self.sample_index = sample_index
        super().__init__(message, {"field": field, "sample_index": sample_index})


class GeometryMismatchError(DataError):
    """Raised when bundle and model geometry disagree."""

    def __init__(self, field: str, expected: int, actual: int):
        self.field = field
        super().__init__(
            f"{field} mismatch: model expects {expected}, data has {actual}",
            {"field": field, "expected": expected, "actual": actual},
        )


class CheckpointError(McfError):
    """Raised when a checkpoint cannot be read or does not match its config."""
    pass


class CheckFailure(McfError):
    """Raised when a gradient suite exceeds its thresholds."""
    pass

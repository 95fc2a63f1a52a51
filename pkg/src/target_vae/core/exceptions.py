"""Custom exceptions for target-vae."""

from typing import Any, Mapping, Optional


class TargetVAEError(Exception):
    """Base exception for all target-vae errors."""
    pass


class InvalidDimensionError(TargetVAEError):
    """Raised when an image, grid or kernel dimension is out of range."""
    pass


class ShapeError(TargetVAEError):
    """Raised when array shapes do not agree."""
    pass


class InvalidArgumentError(TargetVAEError):
    """Raised when a scalar argument is outside its valid range."""
    pass


class DegenerateInputError(TargetVAEError):
    """Raised when a statistic is undefined for the given input."""
    pass


class NumericError(TargetVAEError):
    """Raised when a computation produces NaN or Inf values."""

    def __init__(self, message: str, diagnostics: Optional[Mapping[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class TrainingAbortedError(NumericError):
    """Raised when training stops on a non-finite loss."""

    def __init__(
        self,
        message: str,
        diagnostics: Optional[Mapping[str, Any]] = None,
        last_checkpoint: Optional[str] = None,
    ):
        super().__init__(message, diagnostics)
        self.last_checkpoint = last_checkpoint


class FormatError(TargetVAEError):
    """Raised when a binary file cannot be parsed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigurationError(TargetVAEError):
    """Raised when there's an error in configuration."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class UnknownVariantError(ConfigurationError):
    """Raised when a model variant id is not recognised."""
    pass


class DatasetError(TargetVAEError):
    """Raised when a dataset directory is not of the kind a command needs."""
    pass

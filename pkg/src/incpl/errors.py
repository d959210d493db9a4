"""Exception types shared across the package."""

from __future__ import annotations


class InCPLError(Exception):
    """Base class for all package errors."""


class ConfigurationError(InCPLError):
    """Invalid configuration, manifest, or CLI usage. CLI maps this to exit code 2."""


class ShapeMismatchError(InCPLError, ValueError):
    """Tensor shape does not match what the frozen backend expects."""


class PromptKindError(InCPLError, TypeError):
    """A pixel-space prompt was used where a token prompt is required (or vice versa)."""


class NumericalFailureError(InCPLError):
    """Non-finite loss or degenerate embedding. Carries the offending sample id."""

    def __init__(self, message: str, sample_id: str | None = None):
        super().__init__(message if sample_id is None else f"{message} (sample {sample_id})")
        self.sample_id = sample_id

"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes, so every failure that a caller might
want to distinguish gets its own class.
"""

from __future__ import annotations


class QRLabError(Exception):
    """Base class for all package errors."""


class ConfigError(QRLabError, ValueError):
    """Malformed or out-of-range experiment configuration."""


class PreconditionError(QRLabError, ValueError):
    """An operation was called outside its domain (cone, dimension, grid)."""


class InvariantViolation(QRLabError, RuntimeError):
    """A monitored invariant failed during a computation.

    Flow drivers attach the partial trace as ``trace`` so callers can still
    inspect the samples that were accepted before the failure.
    """

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class AliasingWarning(UserWarning):
    """Spectral tail carries enough energy that truncation is suspect."""

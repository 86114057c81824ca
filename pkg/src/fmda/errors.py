"""Exception types shared across modules, mapped to CLI exit codes."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid or unknown configuration (CLI exit code 2)."""


class FormatError(ValueError):
    """Malformed or truncated data file (CLI exit code 3)."""


class CheckpointMismatchError(FormatError):
    """Checkpoint architecture differs from what the caller expects."""


class NumericalError(RuntimeError):
    """Non-finite values in a computation (CLI exit code 4)."""

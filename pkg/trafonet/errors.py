from __future__ import annotations
from typing import Any, Optional


class ToolkitError(Exception):
    """Base class for every error raised by trafonet."""


class ValidationError(ToolkitError, ValueError):
    """Bad input value (label rows, negative currents, empty lists...)."""


class DimensionError(ValidationError):
    """Array shapes that do not compose."""


class LengthError(ValidationError):
    """Signal too short for the requested framing."""


class ConfigError(ValidationError):
    """Unknown key, bad value or inconsistent configuration."""


class StateError(ToolkitError, RuntimeError):
    """Operation called out of order (backward before forward, step before reset)."""


class DivergenceError(ToolkitError, ArithmeticError):
    """
    Non-finite gradient, loss or ratio during training.
    `record` holds the partial ExperimentRecord when raised out of a training run.
    """

    def __init__(self, message: str, record: Optional[Any] = None) -> None:
        super().__init__(message)
        self.record = record


class IntegrityError(ToolkitError, IOError):
    """Checkpoint file is corrupt or truncated."""


class VersionError(IntegrityError):
    """Checkpoint written by an incompatible format version."""

"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class MorphkitError(Exception):
    """Base class for all toolkit errors."""


class BoundsError(MorphkitError):
    """A region falls outside the image it addresses."""


class ArgumentError(MorphkitError):
    """An argument violates a stated precondition."""


class ParseError(MorphkitError):
    """A record on disk is malformed; carries file and line context."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + where)
        self.path = path
        self.line = line


class DataValidationError(MorphkitError):
    """Loaded data violates a structural invariant."""


class PlacementError(MorphkitError):
    """A trigger footprint cannot be placed under the requested rule."""


class PlanningError(MorphkitError):
    """A poisoning plan cannot be constructed (e.g. no eligible objects)."""


class ConfigError(MorphkitError):
    """A configuration value is invalid; message names the field path."""


class TrainingError(MorphkitError):
    """Detector fitting failed (e.g. a class has no crops)."""


class EvaluationError(MorphkitError):
    """A metric is undefined for the given inputs."""


class CalibrationError(MorphkitError):
    """Defense threshold calibration failed."""


class NumericError(MorphkitError):
    """A numeric routine produced non-finite values."""

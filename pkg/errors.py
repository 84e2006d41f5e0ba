"""
Structured errors raised across the framework.

Every error derives from MacoError and from the closest builtin, so callers
can catch either `MacoError` or e.g. `ValueError`.
"""
from typing import Any, Optional


class MacoError(Exception):
    """Base class for all framework errors."""


class ShapeError(MacoError, ValueError):
    """Extent mismatch in a primitive or stage, naming the layer path."""

    def __init__(self, path: str, message: str, expected: Any = None, got: Any = None):
        self.path = path
        self.expected = expected
        self.got = got
        detail = message
        if expected is not None or got is not None:
            detail = f"{message} (expected {expected}, got {got})"
        super().__init__(f"[{path}] {detail}")


class EmptySetError(ShapeError):
    """A set-valued input (mean, relational class) was empty."""

    def __init__(self, path: str, message: str = "empty set"):
        super().__init__(path, message)


class TargetError(MacoError, IndexError):
    """Class index outside [0, K)."""

    def __init__(self, target: Any, ways: int):
        self.target = target
        self.ways = ways
        super().__init__(f"target {target} outside [0, {ways})")


class ConfigError(MacoError, ValueError):
    """Invalid configuration value or file."""


class SplitError(MacoError, ValueError):
    """Class split counts or manifest are inconsistent."""


class EpisodeError(MacoError, ValueError):
    """Not enough classes or images to build an episode."""


class DatasetError(MacoError, ValueError):
    """Dataset root missing or a class ended up empty."""


class OptimizerError(MacoError, KeyError):
    """Optimizer step requested without a gradient for some parameter."""

    def __init__(self, path: str):
        self.path = path
        super().__init__(f"missing gradient for parameter '{path}'")

    def __str__(self) -> str:
        return self.args[0]


class CheckpointError(MacoError, ValueError):
    """Checkpoint could not be written, read or decoded."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format or code version."""

    def __init__(self, field: str, found: Any, expected: Any, path: Optional[str] = None):
        self.field = field
        self.found = found
        self.expected = expected
        where = f" in {path}" if path else ""
        super().__init__(f"{field} mismatch{where}: found {found}, expected {expected}")


class ReportError(MacoError, OSError):
    """Metrics or report file could not be written."""

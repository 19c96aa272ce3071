# tools/errors.py

from typing import Any, Optional


class SafeSparseError(Exception):
    """Root of every error raised by the simulator."""


class InvalidArgumentError(SafeSparseError, ValueError):
    """A public operation received arguments outside its contract."""


class DegenerateFilterError(SafeSparseError, RuntimeError):
    """
    The poisoning filter would exclude every client.

    `report` carries whatever the filter computed before giving up so the
    harness can still record scores and labels for the round.
    """

    def __init__(self, message: str, report: Optional[Any] = None):
        super().__init__(message)
        self.report = report


class ConfigError(SafeSparseError, ValueError):
    """Config file could not be parsed or violates an invariant."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        location = []
        if field:
            location.append(f"field '{field}'")
        if line is not None:
            location.append(f"line {line}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.field = field
        self.line = line

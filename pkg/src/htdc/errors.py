"""Exception taxonomy shared across the engine.

The CLI maps these onto exit codes: configuration problems exit with 1,
data problems (datasets, scenarios, traces) with 2, and internal invariant
violations with 3.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(EngineError):
    """A knob or parameter is outside its legal domain."""


class DataError(EngineError):
    """Input data (dataset, scenario, trace) cannot be used as requested."""


class TraceFormatError(DataError):
    """A trace file violates the wire format or fails integrity checks."""

    def __init__(self, message: str, line: int | None = None, rule: str | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.rule = rule


class InvariantViolation(EngineError):
    """An internal consistency check failed; a bug, not bad input."""

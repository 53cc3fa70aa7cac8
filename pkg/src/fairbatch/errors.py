"""Exceptions raised by fairbatch."""

from __future__ import annotations


class FairbatchError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(FairbatchError, ValueError):
    """A run configuration, preset name or parameter is invalid."""


class TraceError(FairbatchError, ValueError):
    """A trace file could not be parsed."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TrainingError(FairbatchError, ValueError):
    """A predictor could not be trained on the given corpus."""


class CapacityError(FairbatchError, RuntimeError):
    """The simulated GPU ran out of KV-cache memory."""


class ConsistencyError(FairbatchError, RuntimeError):
    """Internal bookkeeping went out of sync (e.g. completing an unknown request)."""


class MetricsError(FairbatchError, ValueError):
    """A metric is undefined for the given log."""

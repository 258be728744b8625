"""Exception types shared across the pipeline."""

from __future__ import annotations


class OwetcError(Exception):
    """Base class for all package errors."""


class ConfigError(OwetcError, ValueError):
    """A configuration value violates its constraints."""


class FlowParseError(OwetcError, ValueError):
    """A flow file line could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FlowValidationError(OwetcError, ValueError):
    """Flow records violate a corpus invariant (e.g. duplicate ids)."""


class NumericError(OwetcError, ArithmeticError):
    """Training produced a non-finite value."""


class MissingStageError(OwetcError):
    """A pipeline stage was requested before its upstream artifacts exist."""

    def __init__(self, stage: str):
        self.stage = stage
        super().__init__(f"requires stage: {stage}")

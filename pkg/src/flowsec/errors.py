"""Exception hierarchy shared by every flowsec module."""
from __future__ import annotations


class FlowsecError(Exception):
    """Base class for all library errors."""


class ParseError(FlowsecError):
    """Input text could not be decoded (malformed JSON, bad number, ...)."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        prefix = ""
        if source is not None:
            prefix = f"{source}:{line}: " if line is not None else f"{source}: "
        elif line is not None:
            prefix = f"line {line}: "
        super().__init__(prefix + message)


class SchemaError(FlowsecError):
    """A required field is missing or has the wrong type."""

    def __init__(self, field: str, message: str | None = None):
        self.field = field
        super().__init__(message or f"missing required field {field!r}")


class ValidationError(FlowsecError):
    """A value is well-formed but violates a domain invariant."""


class EmptyInputError(FlowsecError):
    pass


class NotFoundError(FlowsecError, KeyError):
    def __str__(self) -> str:  # KeyError would otherwise repr() the message
        return str(self.args[0]) if self.args else ""


class StateError(FlowsecError):
    """Operation called on an object in the wrong lifecycle state."""


class ConfigError(FlowsecError):
    pass


class IntegrityError(FlowsecError):
    """A stored timeline or export failed its consistency checks."""

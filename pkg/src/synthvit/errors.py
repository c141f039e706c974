"""Exception taxonomy shared by every pipeline stage.

Rejections that are part of normal filtering (duplicate prompts, over-long
prompts) are returned as data, never raised. Everything here signals that a
caller-visible operation could not complete.
"""

from __future__ import annotations


class SynthError(Exception):
    """Base class for all package errors."""


# -- schema / file formats ---------------------------------------------------


class FormatError(SynthError):
    """A JSON document is missing a field or has a field of the wrong type."""

    def __init__(self, path: str, message: str = "", *, line: int | None = None):
        self.path = path
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{path}: {message}" if message else f"{where}{path}")


class InvariantViolation(SynthError):
    pass


class SpecError(SynthError):
    def __init__(self, file: str, field: str, message: str):
        self.file = file
        self.field = field
        super().__init__(f"{file}: {field}: {message}")


class ConfigError(SynthError):
    def __init__(self, key: str, message: str = ""):
        self.key = key
        super().__init__(f"{key}: {message}" if message else key)


class ConfigMismatch(SynthError):
    """The manifest was written under a different job configuration."""


# -- templates ---------------------------------------------------------------


class MissingSlot(SynthError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(name)


# -- backends ----------------------------------------------------------------


class BackendError(SynthError):
    pass


class TransportError(BackendError):
    """Connection failure, timeout, or a transient HTTP status."""


class RateLimited(TransportError):
    pass


class Exhausted(TransportError):
    """Transient failures persisted past the retry budget."""

    def __init__(self, message: str, attempts: int = 0):
        self.attempts = attempts
        super().__init__(message)


class BadResponse(BackendError):
    """Terminal HTTP status or a body that does not match the wire contract."""


class SafetyRejected(BackendError):
    pass


class EmptyList(SynthError):
    """A reply that was expected to contain a numbered list had no items."""


# -- prompts and dialogues ---------------------------------------------------


class EmptyPrompt(SynthError):
    pass


class Unparseable(SynthError):
    pass


class TooLong(SynthError):
    pass


class InsufficientPhases(SynthError):
    pass


class ArityMismatch(SynthError):
    pass


# -- evaluation --------------------------------------------------------------


class OutOfRange(SynthError):
    pass


class MissingCase(SynthError):
    pass

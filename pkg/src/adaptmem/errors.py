"""Exception hierarchy shared by every layer of the memory engine."""

from __future__ import annotations


class MemoryEngineError(Exception):
    """Base class for all errors raised by adaptmem."""


class MalformedId(MemoryEngineError, ValueError):
    pass


class MalformedTimestamp(MemoryEngineError, ValueError):
    pass


class InvariantViolation(MemoryEngineError, ValueError):
    """A domain value was constructed in a state its type forbids."""


# --- gateway -----------------------------------------------------------------


class GatewayError(MemoryEngineError):
    """Any failure talking to, or interpreting, a model backend."""


class BackendUnavailable(GatewayError):
    pass


class ContractViolation(GatewayError):
    """Model output never satisfied its JSON contract.

    ``raw`` keeps the last completion seen so callers can log it.
    """

    def __init__(self, message: str, raw: str | None = None, schema: str | None = None):
        super().__init__(message)
        self.raw = raw
        self.schema = schema


class MissingBinding(MemoryEngineError, KeyError):
    def __init__(self, names):
        self.names = sorted(names)
        super().__init__(f"missing prompt bindings: {', '.join(self.names)}")

    def __str__(self) -> str:
        return self.args[0]


class EmptyInput(MemoryEngineError, ValueError):
    pass


class ScriptExhausted(MemoryEngineError, RuntimeError):
    """A scripted mock backend was asked for more output than it holds.

    Deliberately not a GatewayError: an exhausted script is a broken test,
    not a degraded backend, and must never be swallowed by fail-open paths.
    """


# --- store -------------------------------------------------------------------


class StoreError(MemoryEngineError):
    pass


class DimensionMismatch(StoreError, ValueError):
    pass


class NotFound(StoreError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "not found"


class Deleted(NotFound):
    """The id exists only as a tombstone."""


class StorageFailure(StoreError, OSError):
    pass


# --- constructor / ingestion -------------------------------------------------


class EmptyWindow(MemoryEngineError, ValueError):
    pass


class MalformedRecord(MemoryEngineError, ValueError):
    def __init__(self, message: str, line: int | None = None, summary=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
        self.summary = summary

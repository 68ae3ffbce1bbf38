"""Exception hierarchy shared by every stage."""

from __future__ import annotations


class StorypipeError(Exception):
    """Base class for all engine errors."""


class ParseError(StorypipeError):
    """Input bytes are not well-formed structured text."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line
        self.column = column


class ValidationError(StorypipeError):
    """Input parsed fine but violates a data-model invariant."""


class ContractError(StorypipeError):
    """A caller broke an operation's precondition."""


class BackendError(StorypipeError):
    """A neural service call failed. Retryable unless stated otherwise."""

    retryable = True

    def __init__(self, message: str, global_id=None, partial=None):
        super().__init__(message)
        self.global_id = global_id
        self.partial = partial


class ProtocolError(BackendError):
    """A backend response violated the wire contract; never retried."""

    retryable = False


class FixtureMissError(BackendError):
    """Scripted backend has no canned response for a request digest."""

    retryable = False

    def __init__(self, digest: str, op: str = ""):
        super().__init__(f"no fixture entry for {op + ' ' if op else ''}request digest {digest}")
        self.digest = digest
        self.op = op

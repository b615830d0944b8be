"""The internal request/response format shared by every pipeline stage."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from flowcache.wordstream import WordStream

MAX_KEY = 250
MAX_VALUE = 8192
UINT32_MAX = 0xFFFFFFFF


class Opcode(enum.Enum):
    GET = "get"
    SET = "set"
    DELETE = "delete"
    FLUSH = "flush"


class Protocol(enum.Enum):
    BINARY = "binary"
    ASCII = "ascii"


class Status(enum.Enum):
    STORED = "STORED"
    NOT_STORED = "NOT_STORED"
    FOUND = "FOUND"
    NOT_FOUND = "NOT_FOUND"
    DELETED = "DELETED"
    FLUSHED = "FLUSHED"
    ERROR = "ERROR"


class ErrorKind(enum.Enum):
    """Why a request ended in ERROR; selects the wire text or status code."""

    UNKNOWN_COMMAND = "unknown_command"
    BAD_FORMAT = "bad_format"  # malformed or overflowing field
    FRAMING = "framing"  # lengths disagree, missing terminator
    TOO_LARGE = "too_large"
    PROTOCOL = "protocol"  # bad magic
    OUT_OF_MEMORY = "out_of_memory"


class RequestError(Exception):
    """A request the pipeline rejects; carries the error kind for the formatter."""

    kind = ErrorKind.BAD_FORMAT
    # partial metadata recovered before the failure, if any
    meta: Optional["RequestMeta"] = None

    def __init__(self, message: str = "", kind: Optional[ErrorKind] = None):
        super().__init__(message)
        if kind is not None:
            self.kind = kind


class UnsupportedCommand(RequestError):
    kind = ErrorKind.UNKNOWN_COMMAND


class MalformedField(RequestError):
    kind = ErrorKind.BAD_FORMAT


class NumericOverflow(RequestError):
    kind = ErrorKind.BAD_FORMAT


class FramingError(RequestError):
    kind = ErrorKind.FRAMING


class ProtocolError(RequestError):
    kind = ErrorKind.PROTOCOL


class ValueTooLarge(RequestError):
    kind = ErrorKind.TOO_LARGE


class PipelineFault(RuntimeError):
    """Internal desync between stages. Not a client error; the pipeline stops."""


@dataclass(slots=True)
class RequestMeta:
    opcode: Optional[Opcode]
    protocol: Protocol
    key_length: int = 0
    value_length: int = 0
    flags: int = 0
    expiration: int = 0
    opaque: int = 0
    request_id: int = 0
    # set when the parser rejected the request; downstream stages pass it through
    error: Optional[ErrorKind] = None
    # raw binary opcode byte, echoed in binary responses
    opcode_byte: int = 0


@dataclass(slots=True)
class PipelineRequest:
    meta: RequestMeta
    key: bytes = b""
    value: Optional[WordStream] = None


@dataclass(slots=True)
class PipelineResponse:
    meta: RequestMeta
    status: Status
    key: bytes = b""
    flags: int = 0
    value: Optional[WordStream] = None

    def __post_init__(self):
        if (self.value is not None) != (self.status is Status.FOUND):
            raise ValueError("value must be present exactly when status is FOUND")


def validate_meta(meta: RequestMeta, max_key: int = MAX_KEY, max_value: int = MAX_VALUE) -> Optional[str]:
    """Return None if ``meta`` is consistent, else the name of the first violated field."""
    if meta.opcode is None:
        return "opcode"
    if meta.opcode is Opcode.FLUSH:
        if meta.key_length != 0:
            return "key_length"
    elif not 0 < meta.key_length <= max_key:
        return "key_length"
    if meta.value_length < 0 or meta.value_length > max_value:
        return "value_length"
    if meta.value_length > 0 and meta.opcode is not Opcode.SET:
        return "value_length"
    for name in ("flags", "expiration", "opaque"):
        if not 0 <= getattr(meta, name) <= UINT32_MAX:
            return name
    return None

"""Binary protocol request parsing.

Two steps joined by buffers: a field extractor that slices header, extras,
key and value at the offsets the 24-byte header dictates, and an output
formatter that turns those into the internal request format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

from flowcache.proto import (
    MAX_KEY,
    MAX_VALUE,
    FramingError,
    MalformedField,
    Opcode,
    PipelineRequest,
    Protocol,
    ProtocolError,
    RequestError,
    RequestMeta,
    UnsupportedCommand,
    ValueTooLarge,
)
from flowcache.wordstream import StreamWord, WordStream, unpack_words

HEADER = struct.Struct(">BBHBBHIIQ")
HEADER_LEN = HEADER.size  # 24
REQUEST_MAGIC = 0x80
RESPONSE_MAGIC = 0x81

OPCODE_BY_BYTE = {0x00: Opcode.GET, 0x01: Opcode.SET, 0x04: Opcode.DELETE, 0x08: Opcode.FLUSH}
BYTE_BY_OPCODE = {v: k for k, v in OPCODE_BY_BYTE.items()}
SET_EXTRAS = struct.Struct(">II")  # flags, expiration


@dataclass
class BinaryHeader:
    magic: int
    opcode_byte: int
    key_length: int
    extras_length: int
    data_type: int
    reserved: int  # vbucket id in requests, status in responses
    total_body_length: int
    opaque: int
    cas: int = 0

    def pack(self) -> bytes:
        return HEADER.pack(
            self.magic,
            self.opcode_byte,
            self.key_length,
            self.extras_length,
            self.data_type,
            self.reserved,
            self.total_body_length,
            self.opaque,
            self.cas,
        )

    @classmethod
    def unpack(cls, buf: bytes) -> "BinaryHeader":
        return cls(*HEADER.unpack_from(buf))

    @property
    def value_length(self) -> int:
        return self.total_body_length - self.extras_length - self.key_length


def _fail(exc: type[RequestError], msg: str, opcode_byte: int = 0, opaque: int = 0, opcode=None) -> RequestError:
    err = exc(msg)
    err.meta = RequestMeta(opcode, Protocol.BINARY, opaque=opaque, opcode_byte=opcode_byte)
    return err


@dataclass(slots=True)
class BinaryFields:
    """Intermediate buffers between the field extractor and the output formatter."""

    opcode: Opcode
    opcode_byte: int
    opaque: int
    extras: bytes
    key: bytes
    value: bytes


def extract_fields(buf: bytes, max_key: int = MAX_KEY, max_value: int = MAX_VALUE) -> BinaryFields:
    """Field extractor: validate the header and slice the body apart.

    Raised errors carry a partial ``meta`` so an error response can still
    echo the opcode and opaque.
    """
    if len(buf) < HEADER_LEN:
        raise _fail(FramingError, f"message of {len(buf)} bytes is shorter than a header")
    magic, opb, klen, elen, _dt, _vb, blen, opaque, _cas = HEADER.unpack_from(buf)
    if magic != REQUEST_MAGIC:
        raise _fail(ProtocolError, f"bad magic {magic:#04x}", opb, opaque)
    if blen != len(buf) - HEADER_LEN:
        raise _fail(FramingError, f"body length {blen} disagrees with {len(buf) - HEADER_LEN} bytes received",
                    opb, opaque)
    if elen + klen > blen:
        raise _fail(FramingError, "extras and key overrun the body", opb, opaque)
    opcode = OPCODE_BY_BYTE.get(opb)
    if opcode is None:
        raise _fail(UnsupportedCommand, f"unsupported opcode {opb:#04x}", opb, opaque)
    vlen = blen - elen - klen
    problem = None
    if opcode is Opcode.SET:
        if elen != SET_EXTRAS.size:
            problem = MalformedField, "SET requires 8 bytes of extras"
    elif opcode is Opcode.FLUSH:
        if elen not in (0, 4) or klen or vlen:
            problem = MalformedField, "FLUSH takes no key or value"
    elif elen or vlen:
        problem = MalformedField, f"{opcode.name} takes no extras or value"
    if problem is None and opcode is not Opcode.FLUSH and not 0 < klen <= max_key:
        problem = MalformedField, f"key length {klen} out of range"
    if problem is None and vlen > max_value:
        problem = ValueTooLarge, f"value of {vlen} bytes exceeds {max_value}"
    if problem is not None:
        raise _fail(problem[0], problem[1], opb, opaque, opcode)
    k0 = HEADER_LEN + elen
    v0 = k0 + klen
    return BinaryFields(opcode, opb, opaque, buf[HEADER_LEN:k0], buf[k0:v0], buf[v0:])


def format_request(fields: BinaryFields, request_id: int = 0) -> PipelineRequest:
    """Output formatter: build the internal request from the extracted buffers."""
    flags = expiration = 0
    if fields.opcode is Opcode.SET:
        flags, expiration = SET_EXTRAS.unpack(fields.extras)
    meta = RequestMeta(
        fields.opcode,
        Protocol.BINARY,
        len(fields.key),
        len(fields.value),
        flags,
        expiration,
        fields.opaque,
        request_id,
        None,
        fields.opcode_byte,
    )
    value = WordStream(fields.value) if fields.opcode is Opcode.SET else None
    return PipelineRequest(meta, fields.key, value)


def parse_binary(
    words: Iterable[StreamWord], request_id: int = 0, max_key: int = MAX_KEY, max_value: int = MAX_VALUE
) -> PipelineRequest:
    return format_request(extract_fields(unpack_words(words), max_key, max_value), request_id)

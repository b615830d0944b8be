"""Dictionary model of the server: the expected response for every request.

A plain dict applied in request order. Response bytes are rendered here
directly from the wire grammar, independently of the pipeline's formatter.
"""

from __future__ import annotations

import struct

from flowcache.client import OPCODE_BYTES, Request

_HEADER = struct.Struct(">BBHBBHIIQ")


def _binary(op: str, status: int, opaque: int, extras: bytes = b"", value: bytes = b"") -> bytes:
    body = extras + value
    return _HEADER.pack(0x81, OPCODE_BYTES[op], 0, len(extras), 0, status, len(body), opaque, 0) + body


class DictModel:
    def __init__(self):
        self.data: dict[bytes, tuple[int, bytes]] = {}

    def apply(self, r: Request) -> bytes:
        """Update the model with ``r`` and return the response bytes a correct server sends."""
        binary = r.protocol == "binary"
        if r.op == "set":
            self.data[r.key] = (r.flags, r.value)
            return _binary("set", 0, r.opaque) if binary else b"STORED\r\n"
        if r.op == "get":
            hit = self.data.get(r.key)
            if hit is None:
                return _binary("get", 1, r.opaque) if binary else b"END\r\n"
            flags, value = hit
            if binary:
                return _binary("get", 0, r.opaque, struct.pack(">I", flags), value)
            return b"VALUE %s %d %d\r\n%s\r\nEND\r\n" % (r.key, flags, len(value), value)
        if r.op == "delete":
            if self.data.pop(r.key, None) is None:
                return _binary("delete", 1, r.opaque) if binary else b"NOT_FOUND\r\n"
            return _binary("delete", 0, r.opaque) if binary else b"DELETED\r\n"
        if r.op == "flush":
            self.data.clear()
            return _binary("flush", 0, r.opaque) if binary else b"OK\r\n"
        raise ValueError(f"unknown op {r.op!r}")

"""Client-side request encoding and response decoding for both protocols.

Written from the wire grammar alone and kept free of server-side imports,
so it can check the server's output rather than mirror it.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from typing import Optional

HEADER = struct.Struct(">BBHBBHIIQ")
OPCODE_BYTES = {"get": 0x00, "set": 0x01, "delete": 0x04, "flush": 0x08}
OPS_BY_BYTE = {v: k for k, v in OPCODE_BYTES.items()}
ASCII_COMMANDS = {"get": b"get", "set": b"set", "delete": b"delete", "flush": b"flush_all"}


@dataclass
class Request:
    op: str  # get | set | delete | flush
    key: bytes = b""
    value: bytes = b""
    flags: int = 0
    expiration: int = 0
    protocol: str = "ascii"  # ascii | binary
    opaque: int = 0

    def encode(self) -> bytes:
        if self.protocol == "binary":
            return encode_binary(self)
        return encode_ascii(self)


def encode_ascii(r: Request) -> bytes:
    if r.op == "set":
        return b"set %s %d %d %d\r\n%s\r\n" % (r.key, r.flags, r.expiration, len(r.value), r.value)
    if r.op == "flush":
        return b"flush_all\r\n"
    return ASCII_COMMANDS[r.op] + b" " + r.key + b"\r\n"


def encode_binary(r: Request) -> bytes:
    extras = struct.pack(">II", r.flags, r.expiration) if r.op == "set" else b""
    key = b"" if r.op == "flush" else r.key
    value = r.value if r.op == "set" else b""
    body = len(extras) + len(key) + len(value)
    head = HEADER.pack(0x80, OPCODE_BYTES[r.op], len(key), len(extras), 0, 0, body, r.opaque, 0)
    return head + extras + key + value


@dataclass
class Response:
    """A decoded response. ``status`` is the ASCII status word or the binary status code."""

    protocol: str
    status: object
    raw: bytes
    key: bytes = b""
    flags: int = 0
    value: Optional[bytes] = None
    opaque: int = 0
    opcode: int = 0


class NeedMore(Exception):
    pass


def decode_ascii(buf: bytes, pos: int = 0) -> tuple[Response, int]:
    """Decode one ASCII response at ``pos``; returns it and the position after it.

    Raises NeedMore if ``buf`` ends mid-response.
    """
    eol = buf.find(b"\r\n", pos)
    if eol < 0:
        raise NeedMore
    line = buf[pos:eol]
    if not line.startswith(b"VALUE "):
        return Response("ascii", line.decode("latin-1"), buf[pos : eol + 2]), eol + 2
    try:
        _, key, flags, length = line.split(b" ")
        flags, length = int(flags), int(length)
    except ValueError:
        raise ValueError(f"malformed VALUE line {line!r}") from None
    start = eol + 2
    end = start + length
    if len(buf) < end + 7:
        raise NeedMore
    if buf[end : end + 7] != b"\r\nEND\r\n":
        raise ValueError("VALUE body not followed by END")
    return Response("ascii", "VALUE", buf[pos : end + 7], key, flags, buf[start:end]), end + 7


def decode_binary(buf: bytes, pos: int = 0) -> tuple[Response, int]:
    if len(buf) - pos < HEADER.size:
        raise NeedMore
    magic, opcode, klen, elen, _dt, status, blen, opaque, _cas = HEADER.unpack_from(buf, pos)
    if magic != 0x81:
        raise ValueError(f"bad response magic {magic:#04x}")
    end = pos + HEADER.size + blen
    if len(buf) < end:
        raise NeedMore
    body = buf[pos + HEADER.size : end]
    extras = body[:elen]
    key = body[elen : elen + klen]
    value = body[elen + klen :]
    flags = struct.unpack(">I", extras)[0] if elen == 4 else 0
    resp = Response("binary", status, buf[pos:end], key, flags, value if status == 0 and opcode == 0 else None,
                    opaque, opcode)
    return resp, end


def decode(protocol: str, buf: bytes, pos: int = 0) -> tuple[Response, int]:
    return decode_binary(buf, pos) if protocol == "binary" else decode_ascii(buf, pos)


class Client:
    """Blocking TCP client, one request at a time."""

    def __init__(self, host: str = "127.0.0.1", port: int = 11211, protocol: str = "ascii", timeout: float = 5.0):
        self.protocol = protocol
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._buf = b""

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def call(self, req: Request) -> Response:
        self.sock.sendall(req.encode())
        while True:
            try:
                resp, end = decode(req.protocol, self._buf)
                self._buf = self._buf[end:]
                return resp
            except NeedMore:
                chunk = self.sock.recv(65536)
                if not chunk:
                    raise ConnectionError("server closed the connection")
                self._buf += chunk

    def set(self, key: bytes, value: bytes, flags: int = 0, expiration: int = 0) -> Response:
        return self.call(Request("set", key, value, flags, expiration, self.protocol))

    def get(self, key: bytes) -> Response:
        return self.call(Request("get", key, protocol=self.protocol))

    def delete(self, key: bytes) -> Response:
        return self.call(Request("delete", key, protocol=self.protocol))

    def flush(self) -> Response:
        return self.call(Request("flush", protocol=self.protocol))

"""Bob Jenkins' lookup3 ``hashlittle``: 32-bit hash of a byte string."""

from __future__ import annotations

import struct

_M = 0xFFFFFFFF
_BLOCK = struct.Struct("<III")
_PAD = bytes(12)


def _rot(x: int, k: int) -> int:
    return ((x << k) | (x >> (32 - k))) & _M


def _mix(a: int, b: int, c: int) -> tuple[int, int, int]:
    a = (a - c) & _M; a ^= _rot(c, 4); c = (c + b) & _M
    b = (b - a) & _M; b ^= _rot(a, 6); a = (a + c) & _M
    c = (c - b) & _M; c ^= _rot(b, 8); b = (b + a) & _M
    a = (a - c) & _M; a ^= _rot(c, 16); c = (c + b) & _M
    b = (b - a) & _M; b ^= _rot(a, 19); a = (a + c) & _M
    c = (c - b) & _M; c ^= _rot(b, 4); b = (b + a) & _M
    return a, b, c


def bj_hash(key: bytes, init: int = 0) -> int:
    """lookup3 ``hashlittle(key, len(key), init)``, bit-exact with the C reference."""
    n = len(key)
    a = b = c = (0xDEADBEEF + n + init) & _M
    if n == 0:
        return c
    pos = 0
    # all blocks but the last go through mix; the last (1..12 bytes) through final
    while n - pos > 12:
        x, y, z = _BLOCK.unpack_from(key, pos)
        a, b, c = _mix((a + x) & _M, (b + y) & _M, (c + z) & _M)
        pos += 12
    tail = key[pos:]
    x, y, z = _BLOCK.unpack(tail + _PAD[len(tail):])
    a = (a + x) & _M
    b = (b + y) & _M
    c = (c + z) & _M

    # final(a, b, c), rotations inlined
    c ^= b; c = (c - (((b << 14) | (b >> 18)) & _M)) & _M
    a ^= c; a = (a - (((c << 11) | (c >> 21)) & _M)) & _M
    b ^= a; b = (b - (((a << 25) | (a >> 7)) & _M)) & _M
    c ^= b; c = (c - (((b << 16) | (b >> 16)) & _M)) & _M
    a ^= c; a = (a - (((c << 4) | (c >> 28)) & _M)) & _M
    b ^= a; b = (b - (((a << 14) | (a >> 18)) & _M)) & _M
    c ^= b; c = (c - (((b << 24) | (b >> 8)) & _M)) & _M
    return c

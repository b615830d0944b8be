from __future__ import annotations

from flowcache.proto import MalformedField, NumericOverflow, UINT32_MAX

MAX_DIGITS = 10
_POW10 = tuple(10**i for i in range(MAX_DIGITS))


def ascii_to_uint(digits: bytes) -> int:
    """Decode 1..10 ASCII decimal digits into a 32-bit unsigned value.

    Each digit is reduced by 48 and weighted by its decimal position.
    """
    n = len(digits)
    if n == 0:
        raise MalformedField("empty numeric field")
    if n > MAX_DIGITS:
        raise NumericOverflow(f"{n} digits exceed a 32-bit value")
    total = 0
    for i in range(n):
        d = digits[n - 1 - i] - 48
        if not 0 <= d <= 9:
            raise MalformedField(f"non-digit byte {digits[n - 1 - i]:#04x} in numeric field")
        total += d * _POW10[i]
    if total > UINT32_MAX:
        raise NumericOverflow(f"{digits!r} exceeds 2^32-1")
    return total

"""Delimiter search within one 8-byte data word.

Four interchangeable implementations that differ only in whether the word
is shifted to drop the field offset first and in which direction the bytes
are scanned. All return the position of the first matching byte at or after
``offset``, measured from ``offset``; 8 means no match.
"""

from __future__ import annotations

import enum

from flowcache.wordstream import WORD_BYTES

NOT_FOUND = WORD_BYTES


class SearchVariant(enum.Enum):
    SHIFT_REVERSE = "shift_reverse"
    FORWARD_NOSHIFT = "forward_noshift"
    REVERSE_NOSHIFT = "reverse_noshift"
    SHIFT_FORWARD = "shift_forward"


def _shift_reverse(data: bytes, offset: int, delim: int, valid: int) -> int:
    # drop the offset bytes, then scan high to low; each hit overwrites the
    # previous one, so the lowest matching index survives without a break
    sh = data[offset:valid]
    loc = NOT_FOUND
    for i in range(len(sh) - 1, -1, -1):
        if sh[i] == delim:
            loc = i
    return loc


def _forward_noshift(data: bytes, offset: int, delim: int, valid: int) -> int:
    for i in range(offset, valid):
        if data[i] == delim:
            return i - offset
    return NOT_FOUND


def _reverse_noshift(data: bytes, offset: int, delim: int, valid: int) -> int:
    loc = NOT_FOUND
    for i in range(valid - 1, offset - 1, -1):
        if data[i] == delim:
            loc = i - offset
    return loc


def _shift_forward(data: bytes, offset: int, delim: int, valid: int) -> int:
    sh = data[offset:valid]
    for i in range(len(sh)):
        if sh[i] == delim:
            return i
    return NOT_FOUND


SEARCHERS = {
    SearchVariant.SHIFT_REVERSE: _shift_reverse,
    SearchVariant.FORWARD_NOSHIFT: _forward_noshift,
    SearchVariant.REVERSE_NOSHIFT: _reverse_noshift,
    SearchVariant.SHIFT_FORWARD: _shift_forward,
}


def find_delimiter(
    word: bytes,
    offset: int,
    delimiter: int,
    variant: SearchVariant = SearchVariant.SHIFT_REVERSE,
    valid: int = WORD_BYTES,
) -> int:
    """Locate ``delimiter`` in ``word`` starting at ``offset``.

    ``valid`` limits the search to the word's valid bytes (partial final
    words). Returns the match position relative to ``offset``, or 8.
    """
    if not 0 <= offset < WORD_BYTES:
        raise ValueError(f"offset must be in 0..7, got {offset}")
    if len(word) != WORD_BYTES:
        raise ValueError(f"word must be {WORD_BYTES} bytes")
    return SEARCHERS[variant](word, offset, delimiter, valid)

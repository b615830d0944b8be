"""Word-oriented streams and the bounded channels that connect pipeline stages.

A message travels between stages as a sequence of 8-byte ``StreamWord`` beats.
Byte 0 of the message is byte 0 of the first word; only the final word of a
message may be partial, and its ``keep`` mask is left-packed.
"""

from __future__ import annotations

from collections import deque
from typing import Generic, Iterable, Iterator, NamedTuple, Optional, TypeVar

WORD_BYTES = 8
FULL_KEEP = 0xFF
DEFAULT_CAPACITY = 64

T = TypeVar("T")

_PAD = bytes(WORD_BYTES)
# keep mask for n valid bytes, n in 0..8
KEEP_FOR = tuple((1 << n) - 1 for n in range(WORD_BYTES + 1))
_VALID_FOR = {mask: n for n, mask in enumerate(KEEP_FOR)}


class StreamWord(NamedTuple):
    data: bytes
    keep: int = FULL_KEEP
    last: bool = False

    @property
    def valid(self) -> int:
        """Number of valid bytes in this word."""
        return _VALID_FOR[self.keep]

    def payload(self) -> bytes:
        return self.data[: _VALID_FOR[self.keep]]


class FramingViolation(ValueError):
    pass


def check_word(word: StreamWord) -> None:
    """Raise FramingViolation unless ``word`` satisfies the framing invariants."""
    if len(word.data) != WORD_BYTES:
        raise FramingViolation(f"data must be {WORD_BYTES} bytes, got {len(word.data)}")
    if word.keep not in _VALID_FOR or word.keep == 0:
        raise FramingViolation(f"keep mask {word.keep:#04x} is not left-packed and non-empty")
    if not word.last and word.keep != FULL_KEEP:
        raise FramingViolation("only the final word of a message may be partial")


_new = tuple.__new__


def pack_words(message: bytes) -> list[StreamWord]:
    """Split ``message`` into StreamWords, setting ``last`` on the final one."""
    n = len(message)
    if n == 0:
        raise ValueError("cannot frame an empty message")
    rem = n % WORD_BYTES
    if rem:
        body = n - rem
        words = [_new(StreamWord, (message[i : i + 8], 0xFF, False)) for i in range(0, body, 8)]
        words.append(_new(StreamWord, (message[body:] + _PAD[rem:], KEEP_FOR[rem], True)))
    else:
        body = n - 8
        words = [_new(StreamWord, (message[i : i + 8], 0xFF, False)) for i in range(0, body, 8)]
        words.append(_new(StreamWord, (message[body:], 0xFF, True)))
    return words


def unpack_words(words: Iterable[StreamWord]) -> bytes:
    """Concatenate the valid bytes of ``words`` (inverse of :func:`pack_words`)."""
    parts = []
    for w in words:
        parts.append(w.data if w.keep == FULL_KEEP else w.data[: _VALID_FOR[w.keep]])
    return b"".join(parts)


def word_count(nbytes: int) -> int:
    return -(-nbytes // WORD_BYTES)


class WordStream:
    """A framed message held as contiguous bytes.

    Iterating yields the StreamWords the message occupies, so stages that
    forward a value between each other don't re-frame it at every hop.
    """

    __slots__ = ("_buf",)

    def __init__(self, buf: bytes = b""):
        self._buf = bytes(buf)

    @classmethod
    def from_words(cls, words: Iterable[StreamWord]) -> "WordStream":
        return cls(unpack_words(words))

    @property
    def nbytes(self) -> int:
        return len(self._buf)

    def tobytes(self) -> bytes:
        return self._buf

    def words(self) -> list[StreamWord]:
        return pack_words(self._buf) if self._buf else []

    def __iter__(self) -> Iterator[StreamWord]:
        return iter(self.words())

    def __len__(self) -> int:
        return word_count(len(self._buf))

    def __eq__(self, other) -> bool:
        if isinstance(other, WordStream):
            return self._buf == other._buf
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self._buf)

    def __repr__(self) -> str:
        return f"WordStream({self._buf!r})"


class BoundedChannel(Generic[T]):
    """Single-producer single-consumer FIFO with non-blocking ends.

    ``try_write`` refuses when the channel is full and ``try_read`` returns
    None when it is empty; neither blocks. One thread may own each end:
    the producer only appends and the consumer only pops, so the length seen
    by the producer can only shrink underneath it.
    """

    __slots__ = ("capacity", "name", "high_watermark", "_q")

    def __init__(self, capacity: int = DEFAULT_CAPACITY, name: str = ""):
        if not isinstance(capacity, int) or capacity <= 0:
            raise ValueError(f"channel capacity must be a positive integer, got {capacity!r}")
        self.capacity = capacity
        self.name = name
        self.high_watermark = 0
        self._q: deque = deque()

    def try_write(self, item: T) -> bool:
        q = self._q
        n = len(q)
        if n >= self.capacity:
            return False
        q.append(item)
        if n >= self.high_watermark:
            self.high_watermark = n + 1
        return True

    def try_read(self) -> Optional[T]:
        try:
            return self._q.popleft()
        except IndexError:
            return None

    def write_many(self, items: list, start: int = 0) -> int:
        """Append ``items[start:]`` until full; returns how many went in. Never blocks."""
        q = self._q
        room = self.capacity - len(q)
        if room <= 0:
            return 0
        end = min(len(items), start + room)
        if end <= start:
            return 0
        q.extend(items[start:end] if start or end != len(items) else items)
        if len(q) > self.high_watermark:
            self.high_watermark = len(q)
        return end - start

    def read_many(self, limit: int) -> list:
        """Remove and return up to ``limit`` of the oldest items (possibly none)."""
        q = self._q
        n = len(q)
        if n > limit:
            n = limit
        pop = q.popleft
        return [pop() for _ in range(n)]

    def peek(self) -> Optional[T]:
        q = self._q
        return q[0] if q else None

    def empty(self) -> bool:
        return not self._q

    def full(self) -> bool:
        return len(self._q) >= self.capacity

    def free(self) -> int:
        return self.capacity - len(self._q)

    def __len__(self) -> int:
        return len(self._q)

    def __repr__(self) -> str:
        return f"BoundedChannel({self.name!r}, {len(self._q)}/{self.capacity})"


class MessageCounter:
    """Counts words per message as they stream past.

    Two states: IDLE waits for the first word of a message, COUNT accumulates
    until a word with ``last`` set arrives and the total can be written out.
    A single-word message completes straight from IDLE.
    """

    IDLE, COUNT = 0, 1

    def __init__(self, out: BoundedChannel[int]):
        self.out = out
        self.state = self.IDLE
        self.counter = 0
        self._pending: Optional[int] = None

    def feed(self, word: StreamWord) -> None:
        if self._pending is not None:
            raise RuntimeError("previous count not yet delivered")
        if self.state == self.IDLE:
            self.counter = 1
            self.state = self.COUNT
        else:
            self.counter += 1
        if word.last:
            self._pending = self.counter
            self.state = self.IDLE
            self.flush()

    def flush(self) -> bool:
        """Deliver a held count if the output has room; True once nothing is held."""
        if self._pending is None:
            return True
        if self.out.try_write(self._pending):
            self._pending = None
            return True
        return False

    @property
    def blocked(self) -> bool:
        return self._pending is not None


def count_message_words(words: Iterator[StreamWord]) -> int:
    """Consume ``words`` through the first word with ``last`` set and return how many were read."""
    out: BoundedChannel[int] = BoundedChannel(1)
    counter = MessageCounter(out)
    for w in words:
        counter.feed(w)
        n = out.try_read()
        if n is not None:
            return n
    raise FramingViolation("stream ended before a word with last set")

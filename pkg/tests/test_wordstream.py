import pytest
from hypothesis import given, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule
from collections import deque

from flowcache.wordstream import (
    BoundedChannel,
    FramingViolation,
    MessageCounter,
    StreamWord,
    WordStream,
    check_word,
    count_message_words,
    pack_words,
    unpack_words,
    word_count,
)


def test_read_empty_channel_returns_none():
    assert BoundedChannel(4).try_read() is None


def test_push_then_read_returns_item():
    ch = BoundedChannel(4)
    ch.try_write("x")
    assert ch.try_read() == "x"


def test_reads_follow_write_order():
    ch = BoundedChannel(4)
    ch.try_write("x")
    ch.try_write("y")
    assert ch.try_read() == "x"
    assert ch.try_read() == "y"


def test_capacity_one_channel():
    ch = BoundedChannel(1)
    assert ch.try_write(1) is True
    assert ch.try_write(2) is False
    assert len(ch) == 1
    assert ch.try_read() == 1
    assert ch.try_write(3) is True


@pytest.mark.parametrize("bad", [0, -1, 1.5, None])
def test_channel_rejects_bad_capacity(bad):
    with pytest.raises(ValueError):
        BoundedChannel(bad)


def test_write_many_stops_at_capacity():
    ch = BoundedChannel(3)
    assert ch.write_many([1, 2, 3, 4, 5]) == 3
    assert ch.write_many([9]) == 0
    assert ch.read_many(2) == [1, 2]
    assert ch.write_many([4, 5, 6], start=1) == 2
    assert ch.read_many(10) == [3, 5, 6]
    assert ch.high_watermark == 3


class ChannelMachine(RuleBasedStateMachine):
    """Interleaved single and bulk reads/writes against a plain deque."""

    def __init__(self):
        super().__init__()
        self.ch = BoundedChannel(5)
        self.model = deque()
        self.n = 0

    @rule()
    def write(self):
        ok = self.ch.try_write(self.n)
        assert ok == (len(self.model) < 5)
        if ok:
            self.model.append(self.n)
        self.n += 1

    @rule(k=st.integers(0, 7))
    def write_many(self, k):
        items = list(range(self.n, self.n + k))
        took = self.ch.write_many(items)
        assert took == min(k, 5 - len(self.model))
        self.model.extend(items[:took])
        self.n += k

    @rule()
    def read(self):
        got = self.ch.try_read()
        assert got == (self.model.popleft() if self.model else None)

    @rule(k=st.integers(0, 7))
    def read_many(self, k):
        got = self.ch.read_many(k)
        assert got == [self.model.popleft() for _ in range(min(k, len(self.model)))]

    @invariant()
    def bounded(self):
        assert len(self.ch) == len(self.model) <= self.ch.capacity
        assert self.ch.high_watermark <= self.ch.capacity


TestChannelQueueLaw = ChannelMachine.TestCase


@given(st.binary(min_size=1, max_size=1024))
def test_pack_unpack_round_trip(data):
    words = pack_words(data)
    assert unpack_words(words) == data
    assert len(words) == word_count(len(data)) == -(-len(data) // 8)
    for w in words:
        check_word(w)
    assert [w.last for w in words] == [False] * (len(words) - 1) + [True]
    tail = len(data) % 8 or 8
    assert bin(words[-1].keep).count("1") == tail
    assert words[-1].valid == tail


def test_pack_three_bytes():
    (w,) = pack_words(b"bar")
    assert w == StreamWord(b"bar\x00\x00\x00\x00\x00", 0x07, True)


def test_pack_rejects_empty():
    with pytest.raises(ValueError):
        pack_words(b"")


@pytest.mark.parametrize(
    "word",
    [
        StreamWord(b"abc", 0x07, True),  # short data
        StreamWord(b"abcdefgh", 0x00, True),  # empty keep
        StreamWord(b"abcdefgh", 0x05, True),  # not left-packed
        StreamWord(b"abcdefgh", 0x0F, False),  # partial but not last
    ],
)
def test_check_word_rejects(word):
    with pytest.raises(FramingViolation):
        check_word(word)


def test_wordstream_is_lazy_view():
    ws = WordStream(b"hello world")
    assert ws.nbytes == 11 and len(ws) == 2
    assert list(ws) == pack_words(b"hello world")
    assert WordStream.from_words(pack_words(b"hello world")) == ws
    assert WordStream(b"").words() == []


def test_count_single_word():
    assert count_message_words(iter([StreamWord(b"a" * 8, 0xFF, True)])) == 1


def test_count_three_words():
    assert count_message_words(iter(pack_words(b"x" * 20))) == 3


def test_count_back_to_back_messages():
    it = iter(pack_words(b"y" * 16) + pack_words(b"z" * 33))
    assert count_message_words(it) == 2
    assert count_message_words(it) == 5


def test_count_without_last_raises():
    with pytest.raises(FramingViolation):
        count_message_words(iter([StreamWord(b"a" * 8)]))


@given(st.lists(st.integers(1, 60), min_size=1, max_size=30))
def test_counter_matches_scalar_loop(lengths):
    words = [w for n in lengths for w in pack_words(b"q" * n)]
    # scalar oracle: count words between last flags
    expected, run = [], 0
    for w in words:
        run += 1
        if w.last:
            expected.append(run)
            run = 0
    out = BoundedChannel(len(lengths))
    counter = MessageCounter(out)
    for w in words:
        counter.feed(w)
    assert out.read_many(len(lengths)) == expected


def test_counter_holds_count_while_output_full():
    out = BoundedChannel(1)
    counter = MessageCounter(out)
    counter.feed(StreamWord(b"a" * 8, 0xFF, True))
    counter.feed(StreamWord(b"b" * 8, 0xFF, True))
    assert counter.blocked
    with pytest.raises(RuntimeError):
        counter.feed(StreamWord(b"c" * 8, 0xFF, True))
    assert out.try_read() == 1
    assert counter.flush() and out.try_read() == 1

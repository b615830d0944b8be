"""ASCII protocol request parsing.

Grammar::

    command SP key [SP flags SP expiration SP value_length] CRLF [value CRLF]

Commands are ``set``, ``get``, ``delete`` and ``flush_all`` (case-insensitive);
``flush_all`` takes no key. Parsing is split into six field extractors that
each pull exactly one field off the word stream and hand a cursor to the
next one. The cursor is a (word index, byte offset) pair, so a field may
start anywhere inside a word and several fields may end inside one word.
"""

from __future__ import annotations

import re
from typing import Callable, Iterable, Optional

from flowcache.parser.binary import BYTE_BY_OPCODE
from flowcache.parser.numeric import MAX_DIGITS, ascii_to_uint
from flowcache.parser.search import NOT_FOUND, SEARCHERS, SearchVariant
from flowcache.proto import (
    MAX_KEY,
    MAX_VALUE,
    FramingError,
    MalformedField,
    Opcode,
    PipelineRequest,
    Protocol,
    RequestError,
    RequestMeta,
    UnsupportedCommand,
    ValueTooLarge,
)
from flowcache.wordstream import FULL_KEEP, WORD_BYTES, StreamWord, WordStream

SP = 0x20
CR = 0x0D
LF = 0x0A
MAX_LINE = 320
MAX_COMMAND = len(b"flush_all")

COMMANDS = {b"set": Opcode.SET, b"get": Opcode.GET, b"delete": Opcode.DELETE, b"flush_all": Opcode.FLUSH}
_BAD_KEY_BYTE = re.compile(rb"[\x00-\x20\x7f]")
_VALID = {(1 << n) - 1: n for n in range(1, WORD_BYTES + 1)}

Searcher = Callable[[bytes, int, int, int], int]


class AsciiJob:
    """One request moving through the extractor chain with its cursor and the fields pulled so far."""

    __slots__ = (
        "words", "wi", "off", "request_id", "opcode", "key",
        "flags", "expiration", "value_length", "value", "error",
    )

    def __init__(self, words: list[StreamWord], request_id: int = 0):
        self.words = words
        self.wi = 0
        self.off = 0
        self.request_id = request_id
        self.opcode: Optional[Opcode] = None
        self.key = b""
        self.flags = 0
        self.expiration = 0
        self.value_length = 0
        self.value: Optional[bytes] = None
        self.error: Optional[RequestError] = None

    @property
    def position(self) -> int:
        return self.wi * WORD_BYTES + self.off


def _scan(job: AsciiJob, delim: int, search: Searcher, limit: int) -> bytes:
    """Pull bytes from the cursor up to the next ``delim``.

    Leaves the cursor just past the delimiter. More than ``limit`` field
    bytes, or the end of the message, raises.
    """
    words = job.words
    wi, off = job.wi, job.off
    if wi >= len(words):
        raise FramingError("request ended before the field terminator")
    data, keep, _last = words[wi]
    valid = 8 if keep == 0xFF else _VALID[keep]
    if off >= valid:
        raise FramingError("request ended before the field terminator")
    loc = search(data, off, delim, valid)
    if loc != NOT_FOUND:
        # common case: the field ends inside the word it starts in
        if loc > limit:
            raise _overlong(limit)
        end = off + loc + 1
        if end == 8:
            job.wi, job.off = wi + 1, 0
        else:
            job.off = end
        return data[off : off + loc]
    parts = [data[off:valid]]
    total = valid - off
    nwords = len(words)
    while True:
        if total > limit:
            raise _overlong(limit)
        wi += 1
        if wi >= nwords or valid < 8:
            raise FramingError("request ended before the field terminator")
        data, keep, _last = words[wi]
        valid = 8 if keep == 0xFF else _VALID[keep]
        loc = search(data, 0, delim, valid)
        if loc != NOT_FOUND:
            total += loc
            if total > limit:
                raise _overlong(limit)
            parts.append(data[:loc])
            if loc == 7:
                job.wi, job.off = wi + 1, 0
            else:
                job.wi, job.off = wi, loc + 1
            return b"".join(parts)
        total += valid
        parts.append(data[:valid])


def _overlong(limit: int) -> RequestError:
    return MalformedField(f"field longer than {limit} bytes")


def _expect_lf(job: AsciiJob) -> None:
    words = job.words
    wi, off = job.wi, job.off
    if wi >= len(words):
        raise FramingError("CR without LF")
    data, keep, _ = words[wi]
    if off >= (8 if keep == 0xFF else _VALID[keep]) or data[off] != LF:
        raise FramingError("CR without LF")
    if off == 7:
        job.wi, job.off = wi + 1, 0
    else:
        job.off = off + 1


class FieldExtractor:
    """Extracts one field; identical code for every field, configured by delimiter and converter."""

    def __init__(self, name: str, applies: tuple, delimiter: int, limit: int, convert: bool = False):
        self.name = name
        self.applies = applies
        self.delimiter = delimiter
        self.limit = limit
        self.convert = convert

    def run(self, job: AsciiJob, search: Searcher) -> None:
        if job.error is None and job.opcode in self.applies:
            try:
                self._extract(job, search)
            except RequestError as exc:
                job.error = exc

    def _extract(self, job: AsciiJob, search: Searcher) -> None:
        raw = _scan(job, self.delimiter, search, self.limit)
        if self.delimiter == CR:
            _expect_lf(job)
        setattr(job, self.name, ascii_to_uint(raw) if self.convert else raw)


class CommandExtractor(FieldExtractor):
    """The command ends at a space, or at CR for commands without arguments."""

    def __init__(self):
        super().__init__("command", (None,), SP, MAX_COMMAND)

    def _extract(self, job: AsciiJob, search: Searcher) -> None:
        words = job.words
        parts = []
        wi = 0
        while True:
            data, keep, _ = words[wi]
            valid = 8 if keep == 0xFF else _VALID[keep]
            # search CR only ahead of any space
            sp = search(data, 0, SP, valid)
            cr = search(data, 0, CR, sp if sp != NOT_FOUND else valid)
            if cr != NOT_FOUND or sp != NOT_FOUND:
                break
            parts.append(data)
            wi += 1
            if valid < 8 or wi >= len(words) or wi * 8 > MAX_COMMAND:
                raise UnsupportedCommand("unknown command")
        end, hit = (cr, CR) if cr != NOT_FOUND else (sp, SP)
        raw = data[:end] if not parts else b"".join(parts) + data[:end]
        if len(raw) > MAX_COMMAND:
            raise UnsupportedCommand("unknown command")
        if end == 7:
            job.wi, job.off = wi + 1, 0
        else:
            job.wi, job.off = wi, end + 1
        opcode = COMMANDS.get(raw) or COMMANDS.get(raw.lower())
        if opcode is None:
            raise UnsupportedCommand(f"unknown command {raw!r}")
        job.opcode = opcode
        if opcode is Opcode.FLUSH:
            if hit != CR:
                raise MalformedField("flush_all takes no arguments")
            _expect_lf(job)
        elif hit != SP:
            raise UnsupportedCommand(f"{raw.decode()} requires a key")


class KeyExtractor(FieldExtractor):
    def __init__(self):
        super().__init__("key", (Opcode.SET, Opcode.GET, Opcode.DELETE), SP, MAX_KEY)

    def _extract(self, job: AsciiJob, search: Searcher) -> None:
        # set keys end at a space, get/delete keys end the line
        if job.opcode is Opcode.SET:
            raw = _scan(job, SP, search, self.limit)
        else:
            raw = _scan(job, CR, search, self.limit)
            _expect_lf(job)
        if not raw or _BAD_KEY_BYTE.search(raw):
            raise MalformedField("key is empty or contains control characters")
        job.key = raw


class ValueExtractor(FieldExtractor):
    """Last stage: pulls the SET value body and checks nothing trails the request."""

    def __init__(self, max_value: int = MAX_VALUE):
        super().__init__("value", tuple(Opcode), CR, max_value)

    def _extract(self, job: AsciiJob, search: Searcher) -> None:
        pos = job.wi * 8 + job.off
        if pos > MAX_LINE:
            raise FramingError(f"request line longer than {MAX_LINE} bytes")
        words = job.words
        keep = words[-1][1]
        total = (len(words) - 1) * 8 + (8 if keep == 0xFF else _VALID[keep])
        if job.opcode is not Opcode.SET:
            if pos != total:
                raise FramingError("bytes trail the request line")
            return
        n = job.value_length
        if n > self.limit:
            raise ValueTooLarge(f"value of {n} bytes exceeds {self.limit}")
        if total != pos + n + 2:
            raise FramingError(f"value body is {total - pos - 2} bytes, declared {n}")
        buf = b"".join([w[0] for w in words])
        if buf[pos + n : pos + n + 2] != b"\r\n":
            raise FramingError("value body not terminated by CRLF")
        job.value = buf[pos : pos + n]


_NUMERIC = (Opcode.SET,)


def make_extractors(max_key: int = MAX_KEY, max_value: int = MAX_VALUE) -> list[FieldExtractor]:
    key = KeyExtractor()
    key.limit = max_key
    return [
        CommandExtractor(),
        key,
        FieldExtractor("flags", _NUMERIC, SP, MAX_DIGITS, convert=True),
        FieldExtractor("expiration", _NUMERIC, SP, MAX_DIGITS, convert=True),
        FieldExtractor("value_length", _NUMERIC, CR, MAX_DIGITS, convert=True),
        ValueExtractor(max_value),
    ]


def format_request(job: AsciiJob) -> PipelineRequest:
    """Output formatter: collect the extracted fields into the internal format."""
    if job.error is not None:
        meta = RequestMeta(job.opcode, Protocol.ASCII, request_id=job.request_id, error=job.error.kind)
        return PipelineRequest(meta)
    opcode = job.opcode
    meta = RequestMeta(
        opcode,
        Protocol.ASCII,
        len(job.key),
        job.value_length,
        job.flags,
        job.expiration,
        0,
        job.request_id,
        None,
        BYTE_BY_OPCODE[opcode],
    )
    value = WordStream(job.value) if opcode is Opcode.SET else None
    return PipelineRequest(meta, job.key, value)


_DEFAULT_EXTRACTORS = make_extractors()


def parse_ascii(
    words: Iterable[StreamWord],
    request_id: int = 0,
    variant: SearchVariant = SearchVariant.SHIFT_REVERSE,
    max_key: int = MAX_KEY,
    max_value: int = MAX_VALUE,
) -> PipelineRequest:
    """Parse one ASCII request; raises RequestError (with ``meta``) if it is malformed."""
    extractors = _DEFAULT_EXTRACTORS if (max_key, max_value) == (MAX_KEY, MAX_VALUE) else make_extractors(max_key, max_value)
    job = AsciiJob(list(words), request_id)
    search = SEARCHERS[variant]
    for ex in extractors:
        ex.run(job, search)
    if job.error is not None:
        err = job.error
        err.meta = RequestMeta(job.opcode, Protocol.ASCII, request_id=request_id, error=err.kind)
        raise err
    return format_request(job)

"""Response formatter stage: internal responses to memcached wire bytes.

ASCII responses are assembled by five section stages (header text, key,
flags text, length text, value plus terminators). Each appends its bytes
right after the previous section's, so fields of unknown length never need
a realignment pass, and the finished response is cut into words once on
its way out. Binary responses have fixed offsets and are packed in one step.
"""

from __future__ import annotations

import enum
from collections import deque
from typing import Callable, Optional

from flowcache.parser.binary import HEADER, RESPONSE_MAGIC
from flowcache.proto import ErrorKind, Opcode, PipelineResponse, Protocol, Status, UINT32_MAX
from flowcache.wordstream import WORD_BYTES, BoundedChannel, StreamWord, pack_words


class AsciiSection(enum.IntEnum):
    HEADER_TEXT = 0
    KEY = 1
    FLAGS_TEXT = 2
    LENGTH_TEXT = 3
    VALUE_AND_TERMINATORS = 4


ASCII_ERRORS = {
    ErrorKind.UNKNOWN_COMMAND: b"ERROR\r\n",
    ErrorKind.PROTOCOL: b"ERROR\r\n",
    ErrorKind.BAD_FORMAT: b"CLIENT_ERROR bad command line format\r\n",
    ErrorKind.FRAMING: b"CLIENT_ERROR bad data chunk\r\n",
    ErrorKind.TOO_LARGE: b"SERVER_ERROR object too large for cache\r\n",
    ErrorKind.OUT_OF_MEMORY: b"SERVER_ERROR out of memory\r\n",
}

BINARY_STATUS_OK = 0x0000
BINARY_STATUS_NOT_FOUND = 0x0001
BINARY_STATUS_TOO_LARGE = 0x0003
BINARY_STATUS_INVALID = 0x0004
BINARY_STATUS_UNKNOWN = 0x0081
BINARY_STATUS_NO_MEMORY = 0x0082

BINARY_ERRORS = {
    ErrorKind.UNKNOWN_COMMAND: BINARY_STATUS_UNKNOWN,
    ErrorKind.PROTOCOL: BINARY_STATUS_UNKNOWN,
    ErrorKind.BAD_FORMAT: BINARY_STATUS_INVALID,
    ErrorKind.FRAMING: BINARY_STATUS_INVALID,
    ErrorKind.TOO_LARGE: BINARY_STATUS_TOO_LARGE,
    ErrorKind.OUT_OF_MEMORY: BINARY_STATUS_NO_MEMORY,
}

_FLAGS_EXTRAS = b"\x00\x00\x00\x00"


def uint_to_ascii(n: int) -> bytes:
    """Shortest decimal text of a 32-bit unsigned value."""
    if not 0 <= n <= UINT32_MAX:
        raise ValueError(f"{n} is not a 32-bit unsigned value")
    return b"%d" % n


def _ascii_sections(resp: PipelineResponse) -> list[bytes]:
    """Input split: the response's five sections, unconverted numerics still as ints."""
    status = resp.status
    if status is Status.FOUND:
        return [b"VALUE ", resp.key, resp.flags, resp.value.nbytes, resp.value.tobytes()]
    if status is Status.STORED:
        text = b"STORED\r\n"
    elif status is Status.NOT_FOUND:
        text = b"END\r\n" if resp.meta.opcode is Opcode.GET else b"NOT_FOUND\r\n"
    elif status is Status.DELETED:
        text = b"DELETED\r\n"
    elif status is Status.FLUSHED:
        text = b"OK\r\n"
    elif status is Status.NOT_STORED:
        text = b"NOT_STORED\r\n"
    else:
        kind = resp.meta.error
        text = ASCII_ERRORS.get(kind, b"ERROR\r\n") if kind is not None else b"ERROR\r\n"
    return [text, b"", None, None, b""]


# each section stage appends to ``parts``; ``sec`` is the input split's output

def _section_header(parts: list, sec: list) -> None:
    parts.append(sec[0])


def _section_key(parts: list, sec: list) -> None:
    if sec[1]:
        parts.append(sec[1])


def _section_flags(parts: list, sec: list) -> None:
    if sec[2] is not None:
        parts.append(b" %s " % uint_to_ascii(sec[2]))


def _section_length(parts: list, sec: list) -> None:
    if sec[3] is not None:
        parts.append(b"%s\r\n" % uint_to_ascii(sec[3]))


def _section_value(parts: list, sec: list) -> None:
    if sec[2] is not None:
        parts.append(sec[4])
        parts.append(b"\r\nEND\r\n")


SECTION_STAGES = (_section_header, _section_key, _section_flags, _section_length, _section_value)


def ascii_response_bytes(resp: PipelineResponse) -> bytes:
    sec = _ascii_sections(resp)
    parts: list[bytes] = []
    for stage in SECTION_STAGES:
        stage(parts, sec)
    return b"".join(parts)


def format_ascii(resp: PipelineResponse) -> list[StreamWord]:
    if resp.meta.protocol is not Protocol.ASCII:
        raise ValueError("format_ascii needs an ASCII response")
    return pack_words(ascii_response_bytes(resp))


def binary_response_bytes(resp: PipelineResponse) -> bytes:
    meta = resp.meta
    status = resp.status
    extras = b""
    body = b""
    if status is Status.FOUND:
        code = BINARY_STATUS_OK
        extras = resp.flags.to_bytes(4, "big")
        body = resp.value.tobytes()
    elif status is Status.NOT_FOUND:
        code = BINARY_STATUS_NOT_FOUND
    elif status is Status.ERROR:
        code = BINARY_ERRORS.get(meta.error, BINARY_STATUS_INVALID)
    else:
        code = BINARY_STATUS_OK
    header = HEADER.pack(
        RESPONSE_MAGIC, meta.opcode_byte, 0, len(extras), 0, code, len(extras) + len(body), meta.opaque, 0
    )
    return header + extras + body


def format_binary(resp: PipelineResponse) -> list[StreamWord]:
    if resp.meta.protocol is not Protocol.BINARY:
        raise ValueError("format_binary needs a binary response")
    return pack_words(binary_response_bytes(resp))


def format_response(resp: PipelineResponse) -> list[StreamWord]:
    if resp.meta.protocol is Protocol.ASCII:
        return format_ascii(resp)
    return format_binary(resp)


class _Job:
    __slots__ = ("resp", "sections", "parts")

    def __init__(self, resp: PipelineResponse, sections):
        self.resp = resp
        self.sections = sections
        self.parts: list[bytes] = []


class ResponseFormatter:
    """Last pipeline stage; emits each response as a word stream on ``out``.

    ASCII path: input split, five section stages. Binary path: one packing
    stage. Finished responses leave in arrival order.
    """

    def __init__(
        self,
        inp: BoundedChannel[PipelineResponse],
        out: BoundedChannel[StreamWord],
        depth: int = 8,
    ):
        self.inp = inp
        self.out = out
        self.depth = depth
        self.on_complete: Optional[Callable[[PipelineResponse], None]] = None
        self._order: deque[Protocol] = deque()
        # _aq[i] feeds section stage i; _aq[-1] holds finished ASCII jobs
        self._aq = [deque() for _ in range(len(SECTION_STAGES) + 1)]
        self._bq_in: deque = deque()
        self._bq_out: deque = deque()
        self._emitting: Optional[list[StreamWord]] = None
        self._emit_pos = 0
        self._emit_resp: Optional[PipelineResponse] = None

    def idle(self) -> bool:
        return not self._order and self._emitting is None

    def _emit(self) -> bool:
        """Push the current response's words; True once it is fully out."""
        words = self._emitting
        i = self._emit_pos + self.out.write_many(words, self._emit_pos)
        if i < len(words):
            self._emit_pos = i
            return False
        self._emitting = None
        if self.on_complete is not None:
            self.on_complete(self._emit_resp)
        return True

    def step(self) -> bool:
        moved = False
        order = self._order
        aout = self._aq[-1]
        bout = self._bq_out
        # output: finish the response in progress, then start the next in order
        if self._emitting is not None:
            moved = True
            if not self._emit():
                return moved
        while order:
            q = aout if order[0] is Protocol.ASCII else bout
            if not q:
                break
            order.popleft()
            job = q.popleft()
            self._emit_resp = job.resp
            self._emitting = pack_words(b"".join(job.parts))
            self._emit_pos = 0
            moved = True
            if not self._emit():
                break

        depth = self.depth
        aq = self._aq
        for i in range(len(SECTION_STAGES) - 1, -1, -1):
            src, dst = aq[i], aq[i + 1]
            if not src:
                continue
            k = min(len(src), depth - len(dst))
            if k <= 0:
                continue
            stage = SECTION_STAGES[i]
            pop, push = src.popleft, dst.append
            for _ in range(k):
                job = pop()
                stage(job.parts, job.sections)
                push(job)
            moved = True

        bin_in = self._bq_in
        while bin_in and len(bout) < depth:
            job = bin_in.popleft()
            job.parts.append(binary_response_bytes(job.resp))
            bout.append(job)
            moved = True

        # input split
        a0 = aq[0]
        read = self.inp.try_read
        while len(a0) < depth and len(bin_in) < depth:
            resp = read()
            if resp is None:
                break
            moved = True
            if resp.meta.protocol is Protocol.ASCII:
                order.append(Protocol.ASCII)
                a0.append(_Job(resp, _ascii_sections(resp)))
            else:
                order.append(Protocol.BINARY)
                bin_in.append(_Job(resp, None))
        return moved

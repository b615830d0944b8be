from __future__ import annotations

from collections import deque

from flowcache.parser import ascii as ascii_proto
from flowcache.parser import binary as binary_proto
from flowcache.parser.search import SEARCHERS, SearchVariant
from flowcache.proto import MAX_KEY, MAX_VALUE, PipelineRequest, Protocol, RequestError, RequestMeta
from flowcache.wordstream import BoundedChannel, StreamWord, unpack_words

BINARY_MAGIC = binary_proto.REQUEST_MAGIC


def detect_protocol(first_byte: int) -> Protocol:
    return Protocol.BINARY if first_byte == BINARY_MAGIC else Protocol.ASCII


class RequestParser:
    """First pipeline stage: word stream in, PipelineRequests out.

    Internally an intake that gathers a message and tags it with a request
    id, a binary path (field extractor -> output formatter) and an ASCII
    path (six field extractors -> output formatter). The two output
    formatters merge in issue order. Every step advances each sub-stage
    once, last to first, so a request moves one sub-stage per step.
    """

    def __init__(
        self,
        inp: BoundedChannel[StreamWord],
        out: BoundedChannel[PipelineRequest],
        variant: SearchVariant = SearchVariant.SHIFT_REVERSE,
        max_key: int = MAX_KEY,
        max_value: int = MAX_VALUE,
        depth: int = 8,
    ):
        self.inp = inp
        self.out = out
        self.variant = variant
        self.max_key = max_key
        self.max_value = max_value
        self.depth = depth
        self.next_id = 0
        self.on_issue = None  # optional callback(request_id) for instrumentation
        self._search = SEARCHERS[variant]
        self._extractors = ascii_proto.make_extractors(max_key, max_value)
        self._partial: list[StreamWord] = []  # words of a message still arriving
        self._held: list[StreamWord] = []  # burst read from ingress, not yet split
        self._hpos = 0
        self._order: deque[Protocol] = deque()
        # _aq[i] feeds extractor i; _aq[-1] holds finished ASCII jobs
        self._aq = [deque() for _ in range(len(self._extractors) + 1)]
        self._bq_in: deque = deque()
        self._bq_out: deque = deque()

    def idle(self) -> bool:
        return not (self._order or self._partial or self._hpos < len(self._held))

    def step(self) -> bool:
        moved = False
        out = self.out
        order = self._order
        aout = self._aq[-1]
        bout = self._bq_out
        # output formatters, merged in issue order
        while order and not out.full():
            q = aout if order[0] is Protocol.ASCII else bout
            if not q:
                break
            item = q.popleft()
            if order.popleft() is Protocol.ASCII:
                req = ascii_proto.format_request(item)
            else:
                req = item if isinstance(item, PipelineRequest) else binary_proto.format_request(*item)
            out.try_write(req)
            moved = True

        depth = self.depth
        # ASCII field extractors, last first
        aq = self._aq
        search = self._search
        for i in range(len(self._extractors) - 1, -1, -1):
            src, dst = aq[i], aq[i + 1]
            if not src:
                continue
            k = min(len(src), depth - len(dst))
            if k <= 0:
                continue
            run = self._extractors[i].run
            pop, push = src.popleft, dst.append
            for _ in range(k):
                job = pop()
                run(job, search)
                push(job)
            moved = True

        # binary field extractor
        bin_in = self._bq_in
        while bin_in and len(bout) < depth:
            words, rid = bin_in.popleft()
            try:
                fields = binary_proto.extract_fields(unpack_words(words), self.max_key, self.max_value)
                bout.append((fields, rid))
            except RequestError as exc:
                bout.append(_error_request(exc, Protocol.BINARY, rid))
            moved = True

        # intake: words arrive in bursts and are split at each ``last`` flag
        a0 = aq[0]
        held, hpos = self._held, self._hpos
        while len(a0) < depth and len(bin_in) < depth:
            if hpos == len(held):
                held = self.inp.read_many(self.inp.capacity)
                hpos = 0
                if not held:
                    break
            moved = True
            start = hpos
            n = len(held)
            while hpos < n and not held[hpos][2]:
                hpos += 1
            if hpos == n:
                self._partial.extend(held[start:])
                continue
            hpos += 1
            msg = held[start:hpos]
            if self._partial:
                msg = self._partial + msg
                self._partial = []
            rid = self.next_id
            self.next_id = rid + 1
            if self.on_issue is not None:
                self.on_issue(rid)
            if msg[0][0][0] == BINARY_MAGIC:
                order.append(Protocol.BINARY)
                bin_in.append((msg, rid))
            else:
                order.append(Protocol.ASCII)
                a0.append(ascii_proto.AsciiJob(msg, rid))
        self._held, self._hpos = held, hpos
        return moved


def _error_request(exc: RequestError, protocol: Protocol, request_id: int) -> PipelineRequest:
    meta = exc.meta if exc.meta is not None else RequestMeta(None, protocol)
    meta.request_id = request_id
    meta.error = exc.kind
    return PipelineRequest(meta)

"""Assembles parser -> hash table -> value store -> formatter and runs it.

Stages talk only through BoundedChannels. Two ways to run them:
``Pipeline.run_round`` polls every stage once from a single thread
(deterministic, used by tests and the benchmark), and ``ThreadedRunner``
gives each stage its own thread.
"""

from __future__ import annotations

import csv
import struct
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

from flowcache.formatter import ResponseFormatter
from flowcache.hashtable import DEFAULT_BUCKETS, DEFAULT_FILTER_ENTRIES, DEFAULT_SLOTS, DEFAULT_WAYS, HashTable
from flowcache.parser import RequestParser, SearchVariant
from flowcache.proto import MAX_KEY, MAX_VALUE, PipelineFault
from flowcache.valuestore import SlabStore, ValueStore
from flowcache.wordstream import DEFAULT_CAPACITY, BoundedChannel, StreamWord, pack_words, unpack_words

STAGE_NAMES = ("parser", "hash_table", "value_store", "formatter")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class PipelineConfig:
    ingress_capacity: int = DEFAULT_CAPACITY
    parser_out_capacity: int = DEFAULT_CAPACITY
    hash_out_capacity: int = DEFAULT_CAPACITY
    store_out_capacity: int = DEFAULT_CAPACITY
    egress_capacity: int = DEFAULT_CAPACITY
    bucket_count: int = DEFAULT_BUCKETS
    ways: int = DEFAULT_WAYS
    filter_entries: int = DEFAULT_FILTER_ENTRIES
    hash_slot_count: int = DEFAULT_SLOTS
    store_slot_count: int = DEFAULT_SLOTS
    slab_size: int = MAX_VALUE
    max_key: int = MAX_KEY
    max_value: int = MAX_VALUE
    search_variant: SearchVariant = SearchVariant.SHIFT_REVERSE
    concurrency_control: bool = True
    internal_depth: int = 8
    record_dwell: bool = False

    def validate(self) -> None:
        for f in fields(self):
            if f.name.endswith("_capacity"):
                v = getattr(self, f.name)
                if not isinstance(v, int) or v <= 0:
                    raise ConfigError(f.name, f"channel capacity must be a positive integer, got {v!r}")
        b = self.bucket_count
        if not isinstance(b, int) or b <= 0 or b & (b - 1):
            raise ConfigError("bucket_count", f"must be a power of two, got {b!r}")
        if self.ways <= 0:
            raise ConfigError("ways", "must be positive")
        fe = self.filter_entries
        if fe <= 0 or fe > 128 or fe & (fe - 1):
            raise ConfigError("filter_entries", "must be a power of two no larger than 128")
        if self.hash_slot_count <= 0:
            raise ConfigError("hash_slot_count", "must be positive")
        if self.hash_slot_count != self.store_slot_count:
            raise ConfigError(
                "store_slot_count",
                f"hash table addresses {self.hash_slot_count} slots but the value store has {self.store_slot_count}",
            )
        if not 0 < self.max_key <= MAX_KEY:
            raise ConfigError("max_key", f"must be in 1..{MAX_KEY}")
        if self.max_value <= 0:
            raise ConfigError("max_value", "must be positive")
        if self.slab_size < self.max_value:
            raise ConfigError("slab_size", f"slab of {self.slab_size} bytes cannot hold max_value {self.max_value}")
        if self.internal_depth <= 0:
            raise ConfigError("internal_depth", "must be positive")
        if not isinstance(self.search_variant, SearchVariant):
            raise ConfigError("search_variant", f"unknown variant {self.search_variant!r}")


@dataclass
class LatencyRecord:
    request_id: int
    opcode: str
    protocol: str
    ingress_ns: int
    egress_ns: int
    dwell_ns: Optional[dict[str, int]] = None

    @property
    def latency_ns(self) -> int:
        return self.egress_ns - self.ingress_ns


class _StampingChannel(BoundedChannel):
    """Channel that notes when each request's item entered it (for dwell times)."""

    __slots__ = ("stamps",)

    def __init__(self, capacity: int, name: str):
        super().__init__(capacity, name)
        self.stamps: dict[int, int] = {}

    def try_write(self, item) -> bool:
        if BoundedChannel.try_write(self, item):
            self.stamps[item.meta.request_id] = time.perf_counter_ns()
            return True
        return False


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        chan = _StampingChannel if cfg.record_dwell else BoundedChannel
        self.ingress: BoundedChannel[StreamWord] = BoundedChannel(cfg.ingress_capacity, "ingress")
        self.parsed = chan(cfg.parser_out_capacity, "parser->hash_table")
        self.resolved = chan(cfg.hash_out_capacity, "hash_table->value_store")
        self.answered = chan(cfg.store_out_capacity, "value_store->formatter")
        self.egress: BoundedChannel[StreamWord] = BoundedChannel(cfg.egress_capacity, "egress")
        d = cfg.internal_depth
        self.parser = RequestParser(
            self.ingress, self.parsed, cfg.search_variant, cfg.max_key, cfg.max_value, depth=d
        )
        self.hash_table = HashTable(
            self.parsed,
            self.resolved,
            cfg.bucket_count,
            cfg.ways,
            cfg.filter_entries,
            cfg.hash_slot_count,
            cfg.concurrency_control,
            depth=d,
        )
        self.store = SlabStore(cfg.store_slot_count, cfg.slab_size)
        self.value_store = ValueStore(self.resolved, self.answered, self.store, depth=d)
        self.formatter = ResponseFormatter(self.answered, self.egress, depth=d)
        self.stages = (self.parser, self.hash_table, self.value_store, self.formatter)
        self.completed: list = []  # responses in egress order, consumed by run_trace
        self.formatter.on_complete = self.completed.append
        self._reverse = tuple(s.step for s in reversed(self.stages))

    @property
    def channels(self) -> tuple[BoundedChannel, ...]:
        return (self.ingress, self.parsed, self.resolved, self.answered, self.egress)

    def run_round(self) -> bool:
        """Poll each stage once, last stage first. True if anything moved."""
        moved = False
        for step in self._reverse:
            if step():
                moved = True
        return moved

    def idle(self) -> bool:
        return all(len(c) == 0 for c in self.channels) and all(s.idle() for s in self.stages)

    def check_channels(self) -> None:
        for c in self.channels:
            if c.high_watermark > c.capacity or len(c) > c.capacity:
                raise PipelineFault(f"{c.name} exceeded its capacity of {c.capacity}")


def build_pipeline(cfg: Optional[PipelineConfig] = None) -> Pipeline:
    cfg = cfg if cfg is not None else PipelineConfig()
    cfg.validate()
    return Pipeline(cfg)


class ThreadedRunner:
    """Runs each stage in its own thread until ``stop``.

    Idle stages back off briefly so the feeding and draining thread keeps
    getting scheduled.
    """

    def __init__(self, pipeline: Pipeline, idle_sleep: float = 50e-6):
        self.pipeline = pipeline
        self.idle_sleep = idle_sleep
        self.errors: list[BaseException] = []
        self._stop = threading.Event()
        self._threads = [
            threading.Thread(target=self._loop, args=(stage,), name=f"stage-{name}", daemon=True)
            for name, stage in zip(STAGE_NAMES, pipeline.stages)
        ]

    def _loop(self, stage) -> None:
        stop = self._stop
        step = stage.step
        spins = 0
        try:
            while not stop.is_set():
                if step():
                    spins = 0
                    continue
                spins += 1
                time.sleep(0 if spins < 64 else self.idle_sleep)
        except BaseException as exc:  # surfaced by the driving thread
            self.errors.append(exc)
            stop.set()

    def start(self) -> "ThreadedRunner":
        for t in self._threads:
            t.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join()

    @property
    def running(self) -> bool:
        return not self._stop.is_set()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def _opname(meta) -> str:
    return meta.opcode.name if meta.opcode is not None else "ERROR"


def run_trace(
    pipeline: Pipeline,
    requests: Sequence[bytes],
    runner: Optional[ThreadedRunner] = None,
    max_idle_rounds: int = 10_000,
    window: Optional[int] = None,
) -> tuple[list[bytes], list[LatencyRecord]]:
    """Push raw requests through ``pipeline``; return responses (in request order) and latencies.

    Without ``runner`` the caller's thread drives the stages round-robin.
    With a started ``runner`` this thread only feeds ingress and drains egress.
    ``window`` caps how many requests may be outstanding at once; by
    default requests are fed as fast as ingress accepts them.
    """
    if window is not None and window <= 0:
        raise ValueError("window must be positive")
    n = len(requests)
    responses: list[bytes] = []
    records: list[LatencyRecord] = []
    if n == 0:
        return responses, records
    for i, r in enumerate(requests):
        if not r:
            raise ValueError(f"request {i} is empty")

    ingress = pipeline.ingress
    egress = pipeline.egress
    completed = pipeline.completed
    completed.clear()
    first_id = pipeline.parser.next_id
    now = time.perf_counter_ns
    ingress_ns = [0] * n
    egress_ns = [0] * n

    fed = 0  # requests whose words are all in ingress
    pending: list[StreamWord] = []
    pos = 0
    done = 0
    out_words: list[StreamWord] = []
    idle_rounds = 0
    run_round = pipeline.run_round if runner is None else None
    write_many = ingress.write_many
    read_many = egress.read_many
    cap = egress.capacity

    while done < n:
        progressed = False
        # feed
        while True:
            if pos == len(pending):
                if fed == n or (window is not None and fed - done >= window):
                    break
                pending = pack_words(requests[fed])
                pos = 0
            k = write_many(pending, pos)
            if not k:
                break
            if pos == 0:
                ingress_ns[fed] = now()
            pos += k
            progressed = True
            if pos == len(pending):
                fed += 1
        # run
        if run_round is not None:
            if run_round():
                progressed = True
        elif runner.errors:
            raise runner.errors[0]
        # drain
        burst = read_many(cap)
        if burst:
            progressed = True
            t = now()
            for w in burst:
                out_words.append(w)
                if w.last:
                    egress_ns[done] = t
                    responses.append(unpack_words(out_words))
                    out_words = []
                    done += 1
        if progressed:
            idle_rounds = 0
        else:
            idle_rounds += 1
            if runner is None:
                if idle_rounds > max_idle_rounds:
                    raise PipelineFault(f"pipeline stalled with {n - done} responses outstanding")
            else:
                time.sleep(0)

    if runner is not None:
        # the formatter thread reports completion just after its last word
        # goes out, so the drain above can finish first
        deadline = time.monotonic() + 10
        while len(completed) < n:
            if runner.errors:
                raise runner.errors[0]
            if time.monotonic() > deadline:
                raise PipelineFault("formatter never reported the last responses")
            time.sleep(0)

    dwell = pipeline.cfg.record_dwell
    for i, resp in enumerate(completed[:n]):
        meta = resp.meta
        rid = meta.request_id
        if rid != first_id + i:
            raise PipelineFault(f"response {i} carries request id {rid}, expected {first_id + i}")
        rec = LatencyRecord(rid, _opname(meta), meta.protocol.name, ingress_ns[i], egress_ns[i])
        if dwell:
            rec.dwell_ns = _dwell(pipeline, rid, ingress_ns[i], egress_ns[i])
        records.append(rec)
    del completed[:n]
    return responses, records


@dataclass
class FloodResult:
    accepted: int = 0  # requests whose every word entered ingress
    completed: int = 0  # responses drained from egress
    rounds: int = 0
    max_occupancy: dict = field(default_factory=dict)  # channel name -> high watermark
    responses: list = field(default_factory=list, repr=False)


def flood(
    pipeline: Pipeline,
    requests: Sequence[bytes],
    duration_s: float,
    runner: Optional[ThreadedRunner] = None,
    keep_responses: bool = False,
) -> FloodResult:
    """Offer words to ingress as fast as it takes them, cycling through ``requests``, for ``duration_s``.

    Afterwards feeding stops and the pipeline drains; every accepted
    request must come out. Channel bounds are checked after every poll.
    """
    res = FloodResult()
    ingress, egress = pipeline.ingress, pipeline.egress
    framed = [pack_words(r) for r in requests]
    pending = framed[0]
    pos = 0
    k = 0
    partial: list[StreamWord] = []
    stop_at = time.monotonic() + duration_s
    feeding = True
    idle = 0
    while True:
        if feeding and time.monotonic() >= stop_at:
            feeding = False
            if pos:  # finish the message in progress so the parser is not left mid-request
                while pos < len(pending):
                    pos += ingress.write_many(pending, pos)
                    _poll(pipeline, runner, res)
                    _drain_into(egress, partial, res, keep_responses)
                res.accepted += 1
        while feeding:
            took = ingress.write_many(pending, pos)
            pos += took
            if pos < len(pending):
                break
            res.accepted += 1
            k += 1
            pending = framed[k % len(framed)]
            pos = 0
        moved = _poll(pipeline, runner, res)
        drained = _drain_into(egress, partial, res, keep_responses)
        pipeline.check_channels()
        if not feeding:
            if res.completed == res.accepted:
                break
            idle = 0 if (moved or drained) else idle + 1
            if idle > 100_000:
                raise PipelineFault(f"drain stalled: {res.accepted - res.completed} accepted requests never answered")
    res.max_occupancy = {c.name: c.high_watermark for c in pipeline.channels}
    return res


def _poll(pipeline: Pipeline, runner: Optional[ThreadedRunner], res: FloodResult) -> bool:
    if runner is None:
        res.rounds += 1
        return pipeline.run_round()
    if runner.errors:
        raise runner.errors[0]
    time.sleep(0)
    return False


def _drain_into(egress: BoundedChannel, partial: list, res: FloodResult, keep: bool) -> bool:
    words = egress.read_many(egress.capacity)
    for w in words:
        partial.append(w)
        if w.last:
            res.completed += 1
            if keep:
                res.responses.append(unpack_words(partial))
            partial.clear()
    return bool(words)


def _dwell(pipeline: Pipeline, rid: int, t_in: int, t_out: int) -> dict[str, int]:
    marks = [t_in]
    for ch in (pipeline.parsed, pipeline.resolved, pipeline.answered):
        marks.append(ch.stamps.pop(rid, marks[-1]))
    marks.append(t_out)
    return {name: marks[i + 1] - marks[i] for i, name in enumerate(STAGE_NAMES)}


# -- trace and latency files ---------------------------------------------------

_LEN = struct.Struct(">I")


def write_trace(path, requests: Iterable[bytes]) -> None:
    with open(path, "wb") as f:
        for r in requests:
            f.write(_LEN.pack(len(r)))
            f.write(r)


def read_trace(path) -> list[bytes]:
    data = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError(f"truncated length prefix at byte {pos}")
        (n,) = _LEN.unpack_from(data, pos)
        pos += 4
        if pos + n > len(data):
            raise ValueError(f"record at byte {pos - 4} declares {n} bytes, only {len(data) - pos} remain")
        out.append(data[pos : pos + n])
        pos += n
    return out


def write_latency_csv(path, records: Iterable[LatencyRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["request_id", "opcode", "protocol", "latency_ns"])
        for r in records:
            w.writerow([r.request_id, r.opcode, r.protocol, r.latency_ns])

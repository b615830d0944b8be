"""Load generation and measurement against the in-process pipeline or a live server."""

from __future__ import annotations

import asyncio
import math
import random
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from flowcache.client import NeedMore, Request, Response, decode
from flowcache.model import DictModel
from flowcache.pipeline import PipelineConfig, build_pipeline, run_trace
from flowcache.proto import MAX_KEY, MAX_VALUE

OPS = ("get", "set", "delete", "flush")
KEY_PREFIX_LEN = len(b"key%08d" % 0)
HOT_KEY_PROBABILITY = 0.95


class WorkloadError(ValueError):
    pass


@dataclass
class Workload:
    requests: int = 10_000
    mix: dict = field(default_factory=lambda: {"get": 0.9, "set": 0.1})
    key_space: int = 512
    key_length: tuple[int, int] = (KEY_PREFIX_LEN, KEY_PREFIX_LEN)
    value_length: tuple[int, int] = (1, 64)
    protocol: str = "ascii"  # ascii | binary | mixed
    connections: int = 1
    seed: int = 1

    def validate(self, max_key: int = MAX_KEY, max_value: int = MAX_VALUE) -> None:
        if self.requests < 0:
            raise WorkloadError("requests must be non-negative")
        unknown = set(self.mix) - set(OPS)
        if unknown:
            raise WorkloadError(f"unknown operations in mix: {sorted(unknown)}")
        if any(v < 0 for v in self.mix.values()):
            raise WorkloadError("mix ratios must be non-negative")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise WorkloadError(f"mix ratios sum to {sum(self.mix.values())}, not 1")
        if self.key_space <= 0 or self.key_space > 10**8:
            raise WorkloadError("key_space must be in 1..10^8")
        lo, hi = self.key_length
        if not KEY_PREFIX_LEN <= lo <= hi <= max_key:
            raise WorkloadError(f"key lengths must lie in {KEY_PREFIX_LEN}..{max_key}")
        lo, hi = self.value_length
        if not 0 <= lo <= hi <= max_value:
            raise WorkloadError(f"value lengths must lie in 0..{max_value}")
        if self.protocol not in ("ascii", "binary", "mixed"):
            raise WorkloadError(f"unknown protocol {self.protocol!r}")
        if self.connections <= 0:
            raise WorkloadError("connections must be positive")
        if self.connections > 1 and self.mix.get("flush", 0) > 0:
            # a flush on one connection clears every other connection's keys
            raise WorkloadError("flush cannot be mixed into a multi-connection workload")


def make_key(index: int, key_length: tuple[int, int]) -> bytes:
    base = b"key%08d" % index
    lo, hi = key_length
    if hi == lo == len(base):
        return base
    n = lo + (index * 2654435761) % (hi - lo + 1)
    return base + b"x" * max(0, n - len(base))


def generate_workload(w: Workload, connection: int = 0) -> list[Request]:
    """Deterministic request sequence for ``w``.

    With several connections, connection ``c`` draws its own sequence from
    ``seed + c`` over the key indices congruent to ``c``, so connections
    never share keys.
    """
    w.validate()
    c_count = w.connections
    n = w.requests // c_count + (1 if connection < w.requests % c_count else 0)
    rng = random.Random((w.seed << 8) + connection)
    ops = [op for op in OPS if w.mix.get(op, 0) > 0]
    weights = [w.mix[op] for op in ops]
    local_space = max(1, -(-(w.key_space - connection) // c_count))
    live: list[int] = []
    where: dict[int, int] = {}

    def forget(k: int) -> None:
        i = where.pop(k, None)
        if i is not None:
            tail = live.pop()
            if tail != k:
                live[i] = tail
                where[tail] = i

    out: list[Request] = []
    vlo, vhi = w.value_length
    for i, op in enumerate(rng.choices(ops, weights, k=n)):
        if w.protocol == "mixed":
            proto = "binary" if rng.random() < 0.5 else "ascii"
        else:
            proto = w.protocol
        req = Request(op, protocol=proto, opaque=i & 0xFFFFFFFF)
        if op == "flush":
            live.clear()
            where.clear()
        else:
            if op != "set" and live and rng.random() < HOT_KEY_PROBABILITY:
                k = live[rng.randrange(len(live))]
            else:
                k = rng.randrange(local_space)
            req.key = make_key(k * c_count + connection, w.key_length)
            if op == "set":
                req.value = rng.randbytes(rng.randint(vlo, vhi))
                req.flags = rng.getrandbits(16)
                if k not in where:
                    where[k] = len(live)
                    live.append(k)
            elif op == "delete":
                forget(k)
        out.append(req)
    return out


def percentile(sorted_values: Sequence[int], p: float) -> int:
    """Nearest-rank percentile of an ascending sequence."""
    if not sorted_values:
        return 0
    rank = max(1, math.ceil(p / 100 * len(sorted_values)))
    return sorted_values[rank - 1]


@dataclass
class BenchReport:
    total: int
    completed: int = 0
    wall_s: float = 0.0
    latency: dict = field(default_factory=dict)  # "GET/ASCII" -> {count, p50, p95, p99, mean}
    op_counts: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    mismatches: int = 0
    bytes_in: int = 0
    bytes_out: int = 0
    complete: bool = True
    records: list = field(default_factory=list, repr=False)

    @property
    def ops_per_sec(self) -> float:
        return self.completed / self.wall_s if self.wall_s > 0 else 0.0

    def summary(self) -> str:
        lines = [
            f"requests {self.completed}/{self.total}  wall {self.wall_s:.3f}s  "
            f"{self.ops_per_sec:,.0f} ops/s  {'complete' if self.complete else 'INCOMPLETE'}",
            f"bytes out {self.bytes_out}  bytes in {self.bytes_in}  mismatches {self.mismatches}",
        ]
        for name in sorted(self.latency):
            s = self.latency[name]
            lines.append(
                f"  {name:<14} n={s['count']:<6} p50={s['p50'] / 1e3:9.1f}us "
                f"p95={s['p95'] / 1e3:9.1f}us p99={s['p99'] / 1e3:9.1f}us"
            )
        for cat, n in sorted(self.errors.items()):
            lines.append(f"  error {cat}: {n}")
        return "\n".join(lines)


def _summarize(report: BenchReport, samples: dict[str, list[int]]) -> None:
    for name, vals in samples.items():
        vals.sort()
        report.latency[name] = {
            "count": len(vals),
            "p50": percentile(vals, 50),
            "p95": percentile(vals, 95),
            "p99": percentile(vals, 99),
            "mean": sum(vals) / len(vals),
        }
        report.op_counts[name] = len(vals)


def _error_category(raw: bytes, protocol: str) -> Optional[str]:
    if protocol == "binary":
        status = int.from_bytes(raw[6:8], "big") if len(raw) >= 8 else -1
        return None if status in (0, 1) else f"binary_status_{status:#06x}"
    for prefix in (b"SERVER_ERROR", b"CLIENT_ERROR", b"ERROR"):
        if raw.startswith(prefix):
            return prefix.decode().lower()
    return None


def run_bench_in_process(
    w: Workload, validate: bool = True, cfg: Optional[PipelineConfig] = None, pipeline=None
) -> BenchReport:
    w.validate()
    reqs: list[Request] = []
    for c in range(w.connections):
        reqs.extend(generate_workload(w, c))
    report = BenchReport(total=len(reqs))
    if not reqs:
        return report
    pipe = pipeline if pipeline is not None else build_pipeline(cfg)
    encoded = [r.encode() for r in reqs]
    t0 = time.perf_counter()
    responses, records = run_trace(pipe, encoded)
    report.wall_s = time.perf_counter() - t0
    report.completed = len(responses)
    report.records = records
    report.bytes_out = sum(map(len, encoded))
    report.bytes_in = sum(map(len, responses))
    samples: dict[str, list[int]] = {}
    for req, rec in zip(reqs, records):
        samples.setdefault(f"{req.op.upper()}/{req.protocol.upper()}", []).append(rec.latency_ns)
    _summarize(report, samples)
    for req, raw in zip(reqs, responses):
        cat = _error_category(raw, req.protocol)
        if cat:
            report.errors[cat] = report.errors.get(cat, 0) + 1
    if validate:
        # the model replays connections back to back; they share no keys
        model = DictModel()
        for req, raw in zip(reqs, responses):
            if model.apply(req) != raw:
                report.mismatches += 1
        if report.mismatches:
            report.errors["mismatch"] = report.mismatches
    return report


async def _drive_connection(host: str, port: int, reqs: list[Request], validate: bool, window: int,
                            out: dict) -> None:
    reader, writer = await asyncio.open_connection(host, port)
    model = DictModel() if validate else None
    sent_at: list[int] = []
    buf = b""
    pos = 0
    nxt = 0
    try:
        for i, req in enumerate(reqs):
            while nxt < i and i - nxt >= window:
                buf, pos, nxt = await _read_one(reader, reqs, buf, pos, nxt, sent_at, model, out)
            data = req.encode()
            out["bytes_out"] += len(data)
            sent_at.append(time.perf_counter_ns())
            writer.write(data)
            await writer.drain()
        while nxt < len(reqs):
            buf, pos, nxt = await _read_one(reader, reqs, buf, pos, nxt, sent_at, model, out)
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except OSError:
            pass


async def _read_one(reader, reqs, buf, pos, nxt, sent_at, model, out):
    req = reqs[nxt]
    while True:
        try:
            resp, end = decode(req.protocol, buf, pos)
            break
        except NeedMore:
            chunk = await reader.read(65536)
            if not chunk:
                raise ConnectionError("server closed the connection")
            buf = buf[pos:] + chunk
            pos = 0
    now = time.perf_counter_ns()
    out["bytes_in"] += end - pos
    name = f"{req.op.upper()}/{req.protocol.upper()}"
    out["samples"].setdefault(name, []).append(now - sent_at[nxt])
    out["completed"] += 1
    cat = _error_category(resp.raw, req.protocol)
    if cat:
        out["errors"][cat] = out["errors"].get(cat, 0) + 1
    if model is not None and model.apply(req) != resp.raw:
        out["mismatches"] += 1
    return buf, end, nxt + 1


def run_bench_network(host: str, port: int, w: Workload, validate: bool = True, window: int = 16) -> BenchReport:
    w.validate()
    per_conn = [generate_workload(w, c) for c in range(w.connections)]
    report = BenchReport(total=sum(map(len, per_conn)))
    if report.total == 0:
        return report
    acc = {"samples": {}, "errors": {}, "completed": 0, "mismatches": 0, "bytes_in": 0, "bytes_out": 0}

    async def main():
        results = await asyncio.gather(
            *(_drive_connection(host, port, reqs, validate, window, acc) for reqs in per_conn if reqs),
            return_exceptions=True,
        )
        return [r for r in results if isinstance(r, BaseException)]

    t0 = time.perf_counter()
    failures = asyncio.run(main())
    report.wall_s = time.perf_counter() - t0
    report.completed = acc["completed"]
    report.mismatches = acc["mismatches"]
    report.bytes_in = acc["bytes_in"]
    report.bytes_out = acc["bytes_out"]
    report.errors = dict(acc["errors"])
    if report.mismatches:
        report.errors["mismatch"] = report.mismatches
    if failures:
        report.complete = False
        report.errors["connection"] = len(failures)
    _summarize(report, acc["samples"])
    return report


def run_bench(target: Union[str, tuple[str, int]], w: Workload, validate: bool = True,
              cfg: Optional[PipelineConfig] = None) -> BenchReport:
    """``target`` is ``"in-process"`` or a ``(host, port)`` pair."""
    if target == "in-process":
        return run_bench_in_process(w, validate, cfg)
    host, port = target
    return run_bench_network(host, port, w, validate)


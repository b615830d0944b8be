"""Command line: ``flowcache serve | bench | trace``."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from typing import Optional, Sequence

from flowcache.bench import (
    KEY_PREFIX_LEN,
    OPS,
    Workload,
    WorkloadError,
    generate_workload,
    run_bench_in_process,
    run_bench_network,
)
from flowcache.pipeline import (
    ConfigError,
    PipelineConfig,
    build_pipeline,
    read_trace,
    run_trace,
    write_latency_csv,
    write_trace,
)
from flowcache.parser import SearchVariant
from flowcache.server import DEFAULT_PORT, Server


def parse_mix(text: str) -> dict[str, float]:
    """``get=0.9,set=0.1`` -> {"get": 0.9, "set": 0.1}."""
    mix = {}
    for item in text.split(","):
        name, sep, ratio = item.partition("=")
        name = name.strip().lower()
        if not sep or name not in OPS:
            raise argparse.ArgumentTypeError(f"bad mix entry {item!r}; expected op=ratio with op in {', '.join(OPS)}")
        try:
            mix[name] = float(ratio)
        except ValueError:
            raise argparse.ArgumentTypeError(f"ratio {ratio!r} is not a number") from None
    return mix


def parse_range(text: str) -> tuple[int, int]:
    """``32`` or ``16-64``."""
    lo, _, hi = text.partition("-")
    try:
        lo_i = int(lo)
        hi_i = int(hi) if hi else lo_i
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO-HI, got {text!r}") from None
    return lo_i, hi_i


def parse_target(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host.strip("[]"), int(port)


def _add_pipeline_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline")
    g.add_argument("--channel-capacity", type=int, default=64, help="words or items per inter-stage channel")
    g.add_argument("--buckets", type=int, default=4096, help="hash table buckets (power of two)")
    g.add_argument("--ways", type=int, default=8, help="entries per bucket")
    g.add_argument("--slots", type=int, default=4096, help="value store slots")
    g.add_argument("--slab-size", type=int, default=8192, help="bytes per value store slot")
    g.add_argument("--search-variant", choices=[v.value for v in SearchVariant], default="shift_reverse")


def _config(args) -> PipelineConfig:
    c = args.channel_capacity
    return PipelineConfig(
        ingress_capacity=c,
        parser_out_capacity=c,
        hash_out_capacity=c,
        store_out_capacity=c,
        egress_capacity=c,
        bucket_count=args.buckets,
        ways=args.ways,
        hash_slot_count=args.slots,
        store_slot_count=args.slots,
        slab_size=args.slab_size,
        max_value=min(args.slab_size, 8192),
        search_variant=SearchVariant(args.search_variant),
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowcache", description="Streaming-pipeline memcached server and tools.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the TCP/UDP server")
    s.add_argument("--listen", default="127.0.0.1")
    s.add_argument("--port", type=int, default=DEFAULT_PORT, help="TCP port")
    s.add_argument("--udp-port", type=int, default=DEFAULT_PORT, help="UDP port (-1 disables UDP)")
    _add_pipeline_args(s)

    b = sub.add_parser("bench", help="generate load and report throughput and latency")
    where = b.add_mutually_exclusive_group()
    where.add_argument("--target", type=parse_target, help="host:port of a running server")
    where.add_argument("--in-process", action="store_true", help="drive a pipeline in this process (default)")
    b.add_argument("--requests", type=int, default=10_000)
    b.add_argument("--mix", type=parse_mix, default={"get": 0.9, "set": 0.1})
    b.add_argument("--key-space", type=int, default=512)
    b.add_argument("--key-length", type=parse_range, default=(KEY_PREFIX_LEN, KEY_PREFIX_LEN))
    b.add_argument("--value-length", type=parse_range, default=(1, 64))
    b.add_argument("--protocol", choices=["ascii", "binary", "mixed"], default="ascii")
    b.add_argument("--connections", type=int, default=1)
    b.add_argument("--seed", type=int, default=1)
    b.add_argument("--validate", action=argparse.BooleanOptionalAction, default=True,
                   help="check every response against the dictionary model")
    b.add_argument("--csv", help="write per-request latencies here (in-process only)")
    b.add_argument("--write-trace", metavar="PATH", help="also save the generated requests as a trace file")
    _add_pipeline_args(b)

    t = sub.add_parser("trace", help="replay a trace file through an in-process pipeline")
    t.add_argument("trace_file")
    t.add_argument("--responses", help="write the concatenated responses here")
    t.add_argument("--csv", help="write per-request latencies here")
    _add_pipeline_args(t)
    return ap


def cmd_serve(args) -> int:
    udp = None if args.udp_port < 0 else args.udp_port
    server = Server(_config(args), args.listen, args.port, udp)
    try:
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        pass
    return 0


def cmd_bench(args) -> int:
    w = Workload(
        requests=args.requests,
        mix=args.mix,
        key_space=args.key_space,
        key_length=args.key_length,
        value_length=args.value_length,
        protocol=args.protocol,
        connections=args.connections,
        seed=args.seed,
    )
    cfg = _config(args)
    w.validate(cfg.max_key, cfg.max_value)
    if args.write_trace:
        write_trace(args.write_trace, [r.encode() for c in range(w.connections) for r in generate_workload(w, c)])
    if args.target:
        report = run_bench_network(*args.target, w, validate=args.validate)
    else:
        report = run_bench_in_process(w, validate=args.validate, cfg=cfg)
        if args.csv:
            write_latency_csv(args.csv, report.records)
    print(report.summary())
    if report.mismatches or not report.complete:
        return 1
    return 0


def cmd_trace(args) -> int:
    requests = read_trace(args.trace_file)
    pipe = build_pipeline(_config(args))
    responses, records = run_trace(pipe, requests)
    if args.responses:
        with open(args.responses, "wb") as f:
            f.write(b"".join(responses))
    else:
        out = sys.stdout.buffer
        for r in responses:
            out.write(r)
        out.flush()
    if args.csv:
        write_latency_csv(args.csv, records)
    print(f"{len(responses)} responses", file=sys.stderr)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return {"serve": cmd_serve, "bench": cmd_bench, "trace": cmd_trace}[args.command](args)
    except (ConfigError, WorkloadError, ValueError, OSError) as exc:
        print(f"flowcache: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

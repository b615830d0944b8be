import csv

import pytest
from hypothesis import given, settings, strategies as st

from flowcache.client import Request
from flowcache.model import DictModel
from flowcache.pipeline import (
    ConfigError,
    PipelineConfig,
    ThreadedRunner,
    build_pipeline,
    flood,
    read_trace,
    run_trace,
    write_latency_csv,
    write_trace,
)
from flowcache.proto import PipelineFault

from conftest import roundtrip


def test_ascii_set_get(pipe):
    assert roundtrip([b"set foo 7 0 3\r\nbar\r\n", b"get foo\r\n"], pipe) == [
        b"STORED\r\n",
        b"VALUE foo 7 3\r\nbar\r\nEND\r\n",
    ]


def test_binary_get_miss(pipe):
    raw = Request("get", b"nope", protocol="binary", opaque=42).encode()
    (resp,) = roundtrip([raw], pipe)
    assert resp[:2] == b"\x81\x00" and resp[6:8] == b"\x00\x01" and resp[12:16] == (42).to_bytes(4, "big")


def test_protocols_share_one_table(pipe):
    set_b = Request("set", b"k", b"val", 3, protocol="binary").encode()
    assert roundtrip([set_b, b"get k\r\n", b"delete k\r\n", b"get k\r\n"], pipe)[1:] == [
        b"VALUE k 3 3\r\nval\r\nEND\r\n",
        b"DELETED\r\n",
        b"END\r\n",
    ]


def test_flush(pipe):
    out = roundtrip([b"set a 0 0 1\r\n1\r\n", b"flush_all\r\n", b"get a\r\n"], pipe)
    assert out == [b"STORED\r\n", b"OK\r\n", b"END\r\n"]


def test_bad_request_does_not_desync(pipe):
    out = roundtrip([b"bogus\r\n", b"set k 0 0 x\r\nv\r\n", b"set k 0 0 1\r\nv\r\n", b"get k\r\n"], pipe)
    assert out == [
        b"ERROR\r\n",
        b"CLIENT_ERROR bad command line format\r\n",
        b"STORED\r\n",
        b"VALUE k 0 1\r\nv\r\nEND\r\n",
    ]


def test_oversize_value_rejected(pipe):
    big = b"x" * 8193
    assert roundtrip([b"set k 0 0 8193\r\n" + big + b"\r\n"], pipe) == [b"SERVER_ERROR object too large for cache\r\n"]
    assert roundtrip([b"set k 0 0 8192\r\n" + big[:-1] + b"\r\n"], pipe) == [b"STORED\r\n"]


keys = st.sampled_from([b"a", b"bb", b"key0001", b"k" * 250, b"x" * 9])
requests = st.builds(
    Request,
    st.sampled_from(["get", "set", "delete", "flush"]),
    keys,
    st.binary(max_size=80),
    st.integers(0, 2**32 - 1),
    st.integers(0, 2**32 - 1),
    st.sampled_from(["ascii", "binary"]),
    st.integers(0, 2**32 - 1),
)


@settings(max_examples=60)
@given(st.lists(requests, min_size=1, max_size=60))
def test_pipeline_matches_dict_model(reqs):
    model = DictModel()
    expected = [model.apply(r) for r in reqs]
    assert roundtrip([r.encode() for r in reqs]) == expected


def test_empty_trace(pipe):
    assert run_trace(pipe, []) == ([], [])


def test_empty_request_rejected(pipe):
    with pytest.raises(ValueError):
        run_trace(pipe, [b""])


def test_bad_window(pipe):
    with pytest.raises(ValueError):
        run_trace(pipe, [b"get k\r\n"], window=0)


def trace(n):
    return [b"set k%d 0 0 2\r\nab\r\n" % (i % 9) if i % 4 == 0 else b"get k%d\r\n" % (i % 9) for i in range(n)]


def test_request_ids_follow_arrival(pipe):
    _, recs1 = run_trace(pipe, trace(50))
    _, recs2 = run_trace(pipe, trace(10))
    assert [r.request_id for r in recs1 + recs2] == list(range(60))
    assert all(r.egress_ns >= r.ingress_ns for r in recs1 + recs2)


@pytest.mark.parametrize("window", [1, 3, None])
def test_window_does_not_change_responses(window):
    assert roundtrip(trace(200), window=window) == roundtrip(trace(200))


def test_threaded_runner_matches_round_robin():
    pipe = build_pipeline()
    with ThreadedRunner(pipe) as runner:
        got, recs = run_trace(pipe, trace(500), runner=runner)
    assert got == roundtrip(trace(500))
    assert len(recs) == 500 and not runner.errors


def test_dwell_times_add_up():
    pipe = build_pipeline(PipelineConfig(record_dwell=True))
    _, recs = run_trace(pipe, trace(30))
    for r in recs:
        assert set(r.dwell_ns) == {"parser", "hash_table", "value_store", "formatter"}
        assert sum(r.dwell_ns.values()) == r.latency_ns
        assert min(r.dwell_ns.values()) >= 0


@pytest.mark.parametrize(
    "kw, field",
    [
        (dict(ingress_capacity=0), "ingress_capacity"),
        (dict(egress_capacity=-3), "egress_capacity"),
        (dict(bucket_count=1000), "bucket_count"),
        (dict(ways=0), "ways"),
        (dict(filter_entries=12), "filter_entries"),
        (dict(store_slot_count=100), "store_slot_count"),
        (dict(slab_size=100), "slab_size"),
        (dict(max_key=251), "max_key"),
        (dict(internal_depth=0), "internal_depth"),
        (dict(search_variant="fast"), "search_variant"),
    ],
)
def test_config_errors_name_the_field(kw, field):
    with pytest.raises(ConfigError) as info:
        build_pipeline(PipelineConfig(**kw))
    assert info.value.field == field


def test_capacity_one_channels_still_work():
    cfg = PipelineConfig(
        ingress_capacity=1, parser_out_capacity=1, hash_out_capacity=1, store_out_capacity=1, egress_capacity=1
    )
    assert roundtrip(trace(100), build_pipeline(cfg)) == roundtrip(trace(100))


def test_channels_never_exceed_capacity():
    pipe = build_pipeline(PipelineConfig(parser_out_capacity=2, egress_capacity=3))
    run_trace(pipe, trace(300))
    pipe.check_channels()
    for ch in pipe.channels:
        assert ch.high_watermark <= ch.capacity


def test_trace_file_round_trip(tmp_path):
    reqs = trace(20) + [b"\x80" + bytes(23)]
    path = tmp_path / "t.trace"
    write_trace(path, reqs)
    assert read_trace(path) == reqs


@pytest.mark.parametrize("data", [b"\x00\x00", b"\x00\x00\x00\x05abc"])
def test_truncated_trace_file(tmp_path, data):
    path = tmp_path / "bad.trace"
    path.write_bytes(data)
    with pytest.raises(ValueError):
        read_trace(path)


def test_latency_csv(tmp_path, pipe):
    _, recs = run_trace(pipe, trace(5))
    path = tmp_path / "lat.csv"
    write_latency_csv(path, recs)
    rows = list(csv.DictReader(path.open()))
    assert [int(r["request_id"]) for r in rows] == list(range(5))
    assert rows[0]["opcode"] == "SET" and rows[1]["protocol"] == "ASCII"
    assert all(int(r["latency_ns"]) >= 0 for r in rows)


def test_flood_drains_everything():
    pipe = build_pipeline()
    res = flood(pipe, trace(64), 0.3, keep_responses=True)
    assert res.accepted > 0 and res.completed == res.accepted
    assert res.responses[:64] == roundtrip(trace(64))
    for ch in pipe.channels:
        assert res.max_occupancy[ch.name] <= ch.capacity
    assert pipe.idle()


def test_flood_with_threads():
    pipe = build_pipeline()
    with ThreadedRunner(pipe) as runner:
        res = flood(pipe, trace(64), 0.3, runner=runner)
    assert res.completed == res.accepted > 0


def test_stall_is_reported():
    pipe = build_pipeline()
    pipe.formatter.step = lambda: False  # a stage that never moves
    pipe._reverse = tuple(s.step for s in reversed(pipe.stages))
    with pytest.raises(PipelineFault):
        run_trace(pipe, [b"get k\r\n"], max_idle_rounds=50)

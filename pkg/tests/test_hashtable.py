import random
from collections import deque

import pytest
from hypothesis import given, strategies as st

from flowcache.hashtable import ConcurrencyFilter, FilterEntry, HashTable, ht_process
from flowcache.proto import ErrorKind, Opcode, PipelineRequest, Protocol, RequestMeta, Status
from flowcache.wordstream import BoundedChannel, WordStream


def req(op: Opcode, key: bytes = b"", value: bytes = b"", flags: int = 0) -> PipelineRequest:
    meta = RequestMeta(op, Protocol.ASCII, len(key), len(value), flags)
    return PipelineRequest(meta, key, WordStream(value) if op is Opcode.SET else None)


def SET(key, value=b"v", flags=0):
    return req(Opcode.SET, key, value, flags)


def GET(key):
    return req(Opcode.GET, key)


def DEL(key):
    return req(Opcode.DELETE, key)


def FLUSH():
    return req(Opcode.FLUSH)


# -- concurrency filter ----------------------------------------------------


def test_filter_push_compare_pop():
    f = ConcurrencyFilter(4)
    assert not f.compare(b"a")
    assert f.push(FilterEntry(b"a", Opcode.SET))
    assert f.compare(b"a") and not f.compare(b"b")
    assert f.pop()
    assert not f.compare(b"a")
    assert not f.pop()


def test_filter_full_refuses_push():
    f = ConcurrencyFilter(2)
    assert f.push(FilterEntry(b"a", Opcode.SET)) and f.push(FilterEntry(b"b", Opcode.SET))
    assert not f.push(FilterEntry(b"c", Opcode.SET))
    assert f.occupancy == 2 and f.max_occupancy == 2


def test_filter_pointers_wrap():
    f = ConcurrencyFilter(16)
    for i in range(600):
        assert f.push(FilterEntry(b"%d" % i, Opcode.DELETE))
        assert f.compare(b"%d" % i)
        assert f.pop()
    assert f.wr_ptr == f.rd_ptr == 600 % 256
    assert f.occupancy == 0


@pytest.mark.parametrize("cap", [0, 3, 256])
def test_filter_rejects_bad_capacity(cap):
    with pytest.raises(ValueError):
        ConcurrencyFilter(cap)


def test_filter_matches_queue_model():
    # 10^5 random operations against a deque
    rng = random.Random(7)
    f, model = ConcurrencyFilter(16), deque()
    for _ in range(100_000):
        r = rng.random()
        key = b"k%d" % rng.randrange(24)
        if r < 0.4:
            ok = f.push(FilterEntry(key, Opcode.SET))
            assert ok == (len(model) < 16)
            if ok:
                model.append(key)
        elif r < 0.75:
            assert f.pop() == bool(model)
            if model:
                model.popleft()
        else:
            assert f.compare(key) == (key in model)
        assert f.occupancy == len(model)
    assert [e.key for e in f.live()] == list(model)


# -- sequential processing ----------------------------------------------------


def test_set_then_get():
    t = HashTable()
    stored = ht_process(SET(b"foo", b"bar", 7), t)
    assert stored.status is Status.STORED and stored.value_length == 3
    got = ht_process(GET(b"foo"), t)
    assert got.status is Status.FOUND
    assert (got.address, got.value_length, got.flags) == (stored.address, 3, 7)


def test_get_missing():
    assert ht_process(GET(b"nope"), HashTable()).status is Status.NOT_FOUND


def test_delete():
    t = HashTable()
    ht_process(SET(b"k"), t)
    assert ht_process(DEL(b"k"), t).status is Status.DELETED
    assert ht_process(DEL(b"k"), t).status is Status.NOT_FOUND
    assert ht_process(GET(b"k"), t).status is Status.NOT_FOUND


def test_overwrite_reuses_address():
    t = HashTable()
    a = ht_process(SET(b"k", b"one"), t).address
    b = ht_process(SET(b"k", b"three"), t)
    assert b.address == a and b.value_length == 5
    assert len(list(t.entries())) == 1


def test_flush_empties_table():
    t = HashTable(slot_count=8)
    for i in range(5):
        ht_process(SET(b"k%d" % i), t)
    assert ht_process(FLUSH(), t).status is Status.FLUSHED
    assert list(t.entries()) == [] and len(t.free) == 8
    assert ht_process(GET(b"k0"), t).status is Status.NOT_FOUND


def test_error_requests_pass_through():
    r = GET(b"k")
    r.meta.error = ErrorKind.BAD_FORMAT
    t = HashTable()
    out = ht_process(r, t)
    assert out.status is Status.ERROR and out.meta.error is ErrorKind.BAD_FORMAT


def test_out_of_addresses():
    t = HashTable(slot_count=2)
    assert ht_process(SET(b"a"), t).status is Status.STORED
    assert ht_process(SET(b"b"), t).status is Status.STORED
    out = ht_process(SET(b"c"), t)
    assert out.status is Status.ERROR and out.meta.error is ErrorKind.OUT_OF_MEMORY
    # the filter slot was released even though the write failed
    assert t.filter.occupancy == 0
    ht_process(DEL(b"a"), t)
    assert ht_process(SET(b"c"), t).status is Status.STORED


def test_full_bucket():
    t = HashTable(bucket_count=1, ways=2)
    ht_process(SET(b"a"), t)
    ht_process(SET(b"b"), t)
    assert ht_process(SET(b"c"), t).meta.error is ErrorKind.OUT_OF_MEMORY
    assert ht_process(SET(b"a", b"new"), t).status is Status.STORED  # overwrite still fits


@pytest.mark.parametrize("kw", [dict(bucket_count=3), dict(ways=0), dict(slot_count=0)])
def test_bad_geometry(kw):
    with pytest.raises(ValueError):
        HashTable(**kw)


@given(st.lists(st.tuples(st.sampled_from(["set", "del"]), st.integers(0, 40)), max_size=300))
def test_addresses_stay_unique(ops):
    t = HashTable(bucket_count=8, ways=8, slot_count=48)
    model = {}
    for op, k in ops:
        key = b"key%d" % k
        if op == "set":
            out = ht_process(SET(key), t)
            if out.status is Status.STORED:
                model[key] = out.address
        else:
            ht_process(DEL(key), t)
            model.pop(key, None)
    live = {e.key: e.address for _, _, e in t.entries()}
    assert live == model
    used = list(live.values())
    assert len(set(used)) == len(used)
    assert set(used).isdisjoint(t.free)
    assert len(used) + len(t.free) == 48


# -- streaming -------------------------------------------------------------------


def stream(table_kw, requests, out_capacity=64, max_rounds=10_000):
    inp, out = BoundedChannel(len(requests) + 1), BoundedChannel(out_capacity)
    t = HashTable(inp, out, **table_kw)
    assert inp.write_many(requests) == len(requests)
    got, occ = [], 0
    for _ in range(max_rounds):
        t.step()
        occ = max(occ, t.filter.occupancy)
        got.extend(out.read_many(out_capacity))
        if len(got) == len(requests):
            break
    assert t.idle()
    return t, got, occ


def test_get_waits_for_in_flight_write():
    t, got, _ = stream({}, [SET(b"k", b"abc"), GET(b"k")])
    assert [g.status for g in got] == [Status.STORED, Status.FOUND]
    assert got[1].value_length == 3
    assert t.stalls > 0


def test_same_key_writes_serialize():
    t, got, _ = stream({}, [SET(b"k", b"1"), SET(b"k", b"22"), GET(b"k")])
    assert [g.status for g in got] == [Status.STORED] * 2 + [Status.FOUND]
    assert got[0].address == got[1].address
    assert got[2].value_length == 2
    assert len(list(t.entries())) == 1


def test_without_concurrency_control_reads_go_stale():
    _, got, _ = stream(dict(concurrency_control=False), [SET(b"k", b"abc"), GET(b"k")])
    # the GET read its bucket before the SET wrote it
    assert [g.status for g in got] == [Status.STORED, Status.NOT_FOUND]


def test_flush_is_a_barrier():
    reqs = [SET(b"a"), SET(b"b"), FLUSH(), GET(b"a"), SET(b"a"), GET(b"a")]
    _, got, _ = stream({}, reqs)
    assert [g.status for g in got] == [
        Status.STORED, Status.STORED, Status.FLUSHED, Status.NOT_FOUND, Status.STORED, Status.FOUND,
    ]


def test_stream_matches_dict_and_keeps_order():
    rng = random.Random(3)
    reqs, expected, model = [], [], {}
    for i in range(3000):
        key = b"k%d" % rng.randrange(50)
        r = rng.random()
        if r < 0.45:
            reqs.append(SET(key, b"x" * rng.randrange(1, 20)))
            model[key] = reqs[-1].meta.value_length
            expected.append((Status.STORED, model[key]))
        elif r < 0.9:
            reqs.append(GET(key))
            expected.append((Status.FOUND, model[key]) if key in model else (Status.NOT_FOUND, 0))
        else:
            reqs.append(DEL(key))
            expected.append((Status.DELETED if model.pop(key, None) else Status.NOT_FOUND, 0))
        reqs[-1].meta.request_id = i
    _, got, occ = stream({}, reqs, max_rounds=100_000)
    assert [g.meta.request_id for g in got] == list(range(3000))
    assert [(g.status, g.value_length) for g in got] == expected
    assert occ <= 16


def test_filter_occupancy_bounded_under_write_burst():
    reqs = [SET(b"k%d" % i) for i in range(500)]
    t, got, occ = stream({}, reqs, max_rounds=100_000)
    assert all(g.status is Status.STORED for g in got)
    assert occ <= 16 and t.filter.max_occupancy <= 16


def test_output_backpressure():
    t, got, _ = stream({}, [GET(b"k%d" % i) for i in range(50)], out_capacity=1)
    assert [g.key for g in got] == [b"k%d" % i for i in range(50)]


def test_process_refuses_while_write_in_flight():
    t = HashTable()
    t.filter.push(FilterEntry(b"k", Opcode.SET))
    with pytest.raises(RuntimeError):
        t.process(GET(b"k"))

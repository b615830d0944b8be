"""Hash table stage: key -> value-store address, with write/read consistency.

The stage is seven sub-stages in a row: input split, hash, concurrency
control, memory read, key compare, memory write, output logic. Writes
(SET/DELETE) hold an entry in the concurrency filter from concurrency
control until they leave memory write; a GET for a key with a write in
that window waits at concurrency control, because its memory read would
otherwise see the bucket as it was before the write.
"""

from __future__ import annotations

from collections import deque
from typing import NamedTuple, Optional

from flowcache.hashing import bj_hash
from flowcache.proto import ErrorKind, Opcode, PipelineRequest, RequestMeta, Status
from flowcache.wordstream import BoundedChannel, WordStream

DEFAULT_BUCKETS = 4096
DEFAULT_WAYS = 8
DEFAULT_FILTER_ENTRIES = 16
DEFAULT_SLOTS = 4096
HASH_SEED = 0
PTR_MASK = 0xFF  # 8-bit ring pointers


class HashTableEntry(NamedTuple):
    valid: bool
    key: bytes = b""
    address: int = 0
    value_length: int = 0
    flags: int = 0
    expiration: int = 0


EMPTY = HashTableEntry(False)


class FilterEntry(NamedTuple):
    key: bytes
    opcode: Opcode


class ConcurrencyFilter:
    """Queue of in-flight write keys with membership lookup over every live entry.

    Read and write pointers are 8-bit and wrap mod 256; ``capacity`` must
    divide 256 so slot indices stay consistent across the wrap.
    """

    def __init__(self, capacity: int = DEFAULT_FILTER_ENTRIES):
        if capacity <= 0 or capacity > 128 or capacity & (capacity - 1):
            raise ValueError("filter capacity must be a power of two no larger than 128")
        self.capacity = capacity
        self.wr_ptr = 0
        self.rd_ptr = 0
        self.entries: list[Optional[FilterEntry]] = [None] * capacity
        self.max_occupancy = 0

    @property
    def occupancy(self) -> int:
        return (self.wr_ptr - self.rd_ptr) & PTR_MASK

    def push(self, entry: FilterEntry) -> bool:
        occ = (self.wr_ptr - self.rd_ptr) & PTR_MASK
        if occ >= self.capacity:
            return False
        self.entries[self.wr_ptr % self.capacity] = entry
        self.wr_ptr = (self.wr_ptr + 1) & PTR_MASK
        if occ >= self.max_occupancy:
            self.max_occupancy = occ + 1
        return True

    def pop(self) -> bool:
        if self.wr_ptr == self.rd_ptr:
            return False
        self.entries[self.rd_ptr % self.capacity] = None
        self.rd_ptr = (self.rd_ptr + 1) & PTR_MASK
        return True

    def compare(self, key: bytes) -> bool:
        cap = self.capacity
        entries = self.entries
        p = self.rd_ptr
        wr = self.wr_ptr
        while p != wr:
            if entries[p % cap].key == key:
                return True
            p = (p + 1) & PTR_MASK
        return False

    def live(self) -> list[FilterEntry]:
        return [self.entries[(self.rd_ptr + i) % 256 % self.capacity] for i in range(self.occupancy)]


class StoreCommand:
    """Hash-table output: what the value store should do for one request."""

    __slots__ = ("meta", "key", "status", "address", "value_length", "flags", "value")

    def __init__(self, meta: RequestMeta, key: bytes, status: Status, address: int = 0,
                 value_length: int = 0, flags: int = 0, value: Optional[WordStream] = None):
        self.meta = meta
        self.key = key
        self.status = status
        self.address = address
        self.value_length = value_length
        self.flags = flags
        self.value = value

    def __repr__(self):
        return (f"StoreCommand({self.meta.opcode}, {self.key!r}, {self.status.name}, "
                f"addr={self.address}, len={self.value_length})")


class _Op:
    __slots__ = ("meta", "key", "payload", "bucket", "snapshot", "hit", "status", "address", "value_length", "flags")

    def __init__(self, meta: RequestMeta, key: bytes, payload: bool):
        self.meta = meta
        self.key = key
        self.payload = payload  # value parked in the payload buffer
        self.bucket = 0
        self.snapshot = None
        self.hit = -1
        self.status = Status.ERROR
        self.address = 0
        self.value_length = 0
        self.flags = 0


class HashTable:
    """Bucket array, address free list and concurrency filter, plus the seven sub-stages."""

    N_SUBSTAGES = 7

    def __init__(
        self,
        inp: Optional[BoundedChannel[PipelineRequest]] = None,
        out: Optional[BoundedChannel[StoreCommand]] = None,
        bucket_count: int = DEFAULT_BUCKETS,
        ways: int = DEFAULT_WAYS,
        filter_entries: int = DEFAULT_FILTER_ENTRIES,
        slot_count: int = DEFAULT_SLOTS,
        concurrency_control: bool = True,
        depth: int = 8,
    ):
        if bucket_count <= 0 or bucket_count & (bucket_count - 1):
            raise ValueError("bucket_count must be a power of two")
        if ways <= 0 or slot_count <= 0:
            raise ValueError("ways and slot_count must be positive")
        self.inp = inp
        self.out = out
        self.bucket_count = bucket_count
        self.ways = ways
        self.slot_count = slot_count
        self.concurrency_control = concurrency_control
        self.depth = depth
        self.buckets = [[EMPTY] * ways for _ in range(bucket_count)]
        self._dirty: set[int] = set()  # buckets written since the last clear
        self.free = deque(range(slot_count))
        self.filter = ConcurrencyFilter(filter_entries)
        self.stalls = 0
        self._flush_in_flight = False
        self._payload: deque[WordStream] = deque()
        self._q = [deque() for _ in range(self.N_SUBSTAGES - 1)]
        self._stages = (
            self._input_split,
            self._hash,
            self._concurrency_control,
            self._memory_read,
            self._key_compare,
            self._memory_write,
        )

    # -- sub-stages; each returns False to stall on its head item ----------

    def _input_split(self, req: PipelineRequest) -> _Op:
        value = req.value
        if value is not None:
            self._payload.append(value)
            return _Op(req.meta, req.key, True)
        return _Op(req.meta, req.key, False)

    def _hash(self, op: _Op) -> bool:
        if op.meta.error is None and op.meta.opcode is not Opcode.FLUSH:
            op.bucket = bj_hash(op.key, HASH_SEED) & (self.bucket_count - 1)
        return True

    def _concurrency_control(self, op: _Op) -> bool:
        meta = op.meta
        if meta.error is not None:
            return True
        if self._flush_in_flight:
            return False
        if not self.concurrency_control:
            if meta.opcode is Opcode.FLUSH:
                self._flush_in_flight = True
            return True
        opcode = meta.opcode
        f = self.filter
        if opcode is Opcode.GET:
            return not f.compare(op.key)
        if opcode is Opcode.FLUSH:
            if f.wr_ptr != f.rd_ptr:
                return False
            self._flush_in_flight = True
            return True
        # writes to one key also serialize against each other
        if f.compare(op.key):
            return False
        return f.push(FilterEntry(op.key, opcode))

    def _memory_read(self, op: _Op) -> bool:
        if op.meta.error is None and op.meta.opcode is not Opcode.FLUSH:
            op.snapshot = tuple(self.buckets[op.bucket])
        return True

    def _key_compare(self, op: _Op) -> bool:
        meta = op.meta
        if meta.error is not None or meta.opcode is Opcode.FLUSH:
            return True
        key = op.key
        for i, e in enumerate(op.snapshot):
            if e.valid and e.key == key:
                op.hit = i
                break
        if meta.opcode is Opcode.GET:
            if op.hit >= 0:
                e = op.snapshot[op.hit]
                op.status = Status.FOUND
                op.address, op.value_length, op.flags = e.address, e.value_length, e.flags
            else:
                op.status = Status.NOT_FOUND
        return True

    def _memory_write(self, op: _Op) -> bool:
        meta = op.meta
        opcode = meta.opcode
        if meta.error is not None or opcode is Opcode.GET:
            return True
        if opcode is Opcode.FLUSH:
            self.clear()
            op.status = Status.FLUSHED
            self._flush_in_flight = False
            return True
        bucket = self.buckets[op.bucket]
        # slot placement uses the live bucket: other keys may have landed
        # in it since this op's memory read
        hit = op.hit
        if hit >= 0 and not (bucket[hit].valid and bucket[hit].key == op.key):
            hit = _find(bucket, op.key)
        if opcode is Opcode.SET:
            if hit >= 0:
                addr = bucket[hit].address
                slot = hit
            else:
                slot = _find_free(bucket)
                if slot < 0 or not self.free:
                    meta.error = ErrorKind.OUT_OF_MEMORY
                    op.status = Status.ERROR
                    self._exit_critical()
                    return True
                addr = self.free.popleft()
            bucket[slot] = HashTableEntry(True, op.key, addr, meta.value_length, meta.flags, meta.expiration)
            self._dirty.add(op.bucket)
            op.status = Status.STORED
            op.address = addr
            op.value_length = meta.value_length
            op.flags = meta.flags
        else:  # DELETE
            if hit >= 0:
                self.free.append(bucket[hit].address)
                bucket[hit] = EMPTY
                op.status = Status.DELETED
            else:
                op.status = Status.NOT_FOUND
        self._exit_critical()
        return True

    def _exit_critical(self) -> None:
        if self.concurrency_control and not self.filter.pop():
            raise AssertionError("write left the critical section with an empty filter")

    def _output(self, op: _Op) -> StoreCommand:
        value = self._payload.popleft() if op.payload else None
        meta = op.meta
        status = Status.ERROR if meta.error is not None else op.status
        return StoreCommand(meta, op.key, status, op.address, op.value_length, op.flags, value)

    # -- scheduling ---------------------------------------------------------

    def idle(self) -> bool:
        return not any(self._q)

    def step(self) -> bool:
        moved = False
        q = self._q
        depth = self.depth
        out = self.out
        last = q[-1]
        while last and not out.full():
            out.try_write(self._output(last.popleft()))
            moved = True
        stages = self._stages
        for i in range(len(stages) - 1, 0, -1):
            src, dst = q[i - 1], q[i]
            k = min(len(src), depth - len(dst))
            if k <= 0:
                continue
            fn = stages[i]
            pop, push = src.popleft, dst.append
            for _ in range(k):
                if not fn(src[0]):
                    self.stalls += 1
                    break
                push(pop())
                moved = True
        first = q[0]
        read = self.inp.try_read
        while len(first) < depth:
            req = read()
            if req is None:
                break
            first.append(self._input_split(req))
            moved = True
        return moved

    def process(self, req: PipelineRequest) -> StoreCommand:
        """Run one request through every sub-stage back to back.

        Only valid while nothing else is in flight; a stall here would wait forever.
        """
        op = self._input_split(req)
        for fn in self._stages[1:]:
            if not fn(op):
                raise RuntimeError("sequential request stalled; another request is in flight")
        return self._output(op)

    # -- table maintenance ----------------------------------------------------

    def clear(self) -> None:
        """Invalidate every entry and return all addresses to the free list."""
        buckets = self.buckets
        empty = [EMPTY] * self.ways
        for bi in self._dirty:
            buckets[bi][:] = empty
        self._dirty.clear()
        self.free = deque(range(self.slot_count))

    def entries(self):
        """Yield (bucket, slot, entry) for every valid entry."""
        for bi, b in enumerate(self.buckets):
            for si, e in enumerate(b):
                if e.valid:
                    yield bi, si, e

    def dump(self) -> str:
        return "".join(
            f"{bi} {si} {e.key.hex()} {e.address} {e.value_length}\n" for bi, si, e in self.entries()
        )


def _find(bucket: list[HashTableEntry], key: bytes) -> int:
    for i, e in enumerate(bucket):
        if e.valid and e.key == key:
            return i
    return -1


def _find_free(bucket: list[HashTableEntry]) -> int:
    for i, e in enumerate(bucket):
        if not e.valid:
            return i
    return -1


def ht_process(req: PipelineRequest, table: HashTable) -> StoreCommand:
    return table.process(req)

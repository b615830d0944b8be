"""Value store stage: reads and writes values at the addresses the hash table resolved."""

from __future__ import annotations

from collections import deque
from typing import Iterable, Optional

from flowcache.hashtable import StoreCommand
from flowcache.proto import (
    MAX_VALUE,
    ErrorKind,
    PipelineFault,
    PipelineResponse,
    Status,
)
from flowcache.wordstream import BoundedChannel, StreamWord, WordStream, pack_words, unpack_words


class SlabStore:
    """``slot_count`` fixed slots of ``slab_size`` bytes each.

    Slots are materialized on first write. ``accesses`` counts reads plus
    writes so tests can check that pass-through commands never touch memory.
    """

    def __init__(self, slot_count: int, slab_size: int = MAX_VALUE):
        if slot_count <= 0 or slab_size <= 0:
            raise ValueError("slot_count and slab_size must be positive")
        self.slot_count = slot_count
        self.slab_size = slab_size
        self.storage: list[Optional[bytes]] = [None] * slot_count
        self.lengths = [0] * slot_count
        self.accesses = 0

    def _check(self, address: int) -> None:
        if not 0 <= address < self.slot_count:
            raise PipelineFault(f"address {address} outside 0..{self.slot_count - 1}")

    def write(self, address: int, value: bytes) -> bool:
        """Store ``value`` at ``address``; False (nothing written) if it exceeds the slab."""
        self._check(address)
        if len(value) > self.slab_size:
            return False
        self.accesses += 1
        self.storage[address] = value
        self.lengths[address] = len(value)
        return True

    def read(self, address: int, value_length: int) -> bytes:
        self._check(address)
        if self.lengths[address] != value_length:
            raise PipelineFault(
                f"slot {address} holds {self.lengths[address]} bytes, hash table expects {value_length}"
            )
        self.accesses += 1
        return self.storage[address] or b""


def vs_write(store: SlabStore, address: int, value: Iterable[StreamWord], value_length: int) -> Status:
    data = value.tobytes() if isinstance(value, WordStream) else unpack_words(value)
    if len(data) != value_length:
        raise PipelineFault(f"value stream carries {len(data)} bytes, header says {value_length}")
    return Status.STORED if store.write(address, data) else Status.ERROR


def vs_read(store: SlabStore, address: int, value_length: int) -> list[StreamWord]:
    data = store.read(address, value_length)
    return pack_words(data) if data else []


def vs_dispatch(store: SlabStore, cmd: StoreCommand) -> PipelineResponse:
    """Execute one hash-table command against ``store`` and build its response."""
    meta = cmd.meta
    status = cmd.status
    if status is Status.STORED:
        status = vs_write(store, cmd.address, cmd.value, cmd.value_length)
        if status is Status.ERROR:
            meta.error = ErrorKind.TOO_LARGE
        return PipelineResponse(meta, status, cmd.key)
    if status is Status.FOUND:
        value = WordStream(store.read(cmd.address, cmd.value_length))
        return PipelineResponse(meta, status, cmd.key, cmd.flags, value)
    return PipelineResponse(meta, status, cmd.key)


class ValueStore:
    """Five blocks: input logic, metadata buffer, write unit, read unit, output logic.

    Input logic parks every command's metadata in the buffer and routes the
    value work to the write or read unit, tagged with a sequence number.
    The read unit never runs ahead of an older pending write, and output
    logic re-merges in arrival order.

    A command sits in the metadata buffer from input logic until output
    logic, several steps, so the buffer holds ``META_ROUNDS * depth``
    commands to keep a full burst moving every step.
    """

    META_ROUNDS = 4

    def __init__(
        self,
        inp: BoundedChannel[StoreCommand],
        out: BoundedChannel[PipelineResponse],
        store: SlabStore,
        depth: int = 8,
    ):
        self.inp = inp
        self.out = out
        self.store = store
        self.depth = depth
        self.meta_capacity = self.META_ROUNDS * depth
        self._meta: deque = deque()  # (seq, command) in arrival order
        self._writes: deque = deque()  # (seq, command)
        self._reads: deque = deque()
        self._done: dict[int, PipelineResponse] = {}
        self._seq = 0

    def idle(self) -> bool:
        return not self._meta

    def step(self) -> bool:
        moved = False
        out = self.out
        meta = self._meta
        done = self._done
        # output logic
        while meta and not out.full():
            seq, cmd = meta[0]
            resp = done.pop(seq, None)
            if resp is None:
                if cmd.status is Status.STORED or cmd.status is Status.FOUND:
                    break  # still in a read/write unit
                resp = PipelineResponse(cmd.meta, cmd.status, cmd.key)
            meta.popleft()
            out.try_write(resp)
            moved = True

        store = self.store
        # read and write units take turns by arrival order: a read must not
        # pass an older write to its slot, nor a write an older read
        writes = self._writes
        reads = self._reads
        while writes or reads:
            if writes and (not reads or writes[0][0] < reads[0][0]):
                seq, cmd = writes.popleft()
            else:
                seq, cmd = reads.popleft()
            done[seq] = vs_dispatch(store, cmd)
            moved = True

        # input logic
        read = self.inp.try_read
        taken = 0
        while taken < self.depth and len(meta) < self.meta_capacity:
            cmd = read()
            if cmd is None:
                break
            seq = self._seq
            self._seq = seq + 1
            meta.append((seq, cmd))
            taken += 1
            status = cmd.status
            if status is Status.STORED:
                writes.append((seq, cmd))
            elif status is Status.FOUND:
                reads.append((seq, cmd))
            moved = True
        return moved

"""TCP and UDP front-end: frames client bytes into pipeline messages and routes responses back.

The pipeline is single-input, single-output and order-preserving, so the
front-end keeps one FIFO of ClientTags in the order requests enter the
pipeline; the n-th response to come out belongs to the n-th tag.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional

from flowcache.formatter import BINARY_STATUS_TOO_LARGE
from flowcache.parser.ascii import MAX_LINE
from flowcache.parser.binary import HEADER, HEADER_LEN, REQUEST_MAGIC
from flowcache.pipeline import Pipeline, PipelineConfig, build_pipeline
from flowcache.proto import MAX_KEY, PipelineFault
from flowcache.wordstream import pack_words, unpack_words

log = logging.getLogger(__name__)

DEFAULT_PORT = 11211
UDP_HEADER = struct.Struct(">HHHH")
UDP_MAX_DATAGRAM = 1400  # conservative single-datagram payload, frame header included
UDP_TOO_LARGE = b"SERVER_ERROR object too large for cache\r\n"
BACKLOG_LIMIT = 64  # framed requests waiting for ingress before TCP reads pause
ROUNDS_PER_TICK = 256
CLOSE_GRACE_S = 1.0  # how long a half-closed connection waits for the peer to hang up


class Transport(enum.Enum):
    TCP = "tcp"
    UDP = "udp"


@dataclass
class UdpFrameHeader:
    request_id: int
    sequence: int = 0
    total_datagrams: int = 1
    reserved: int = 0

    def pack(self) -> bytes:
        return UDP_HEADER.pack(self.request_id, self.sequence, self.total_datagrams, self.reserved)

    @classmethod
    def unpack(cls, buf: bytes) -> "UdpFrameHeader":
        return cls(*UDP_HEADER.unpack_from(buf))


@dataclass
class ClientTag:
    """Where one in-flight request's response goes."""

    transport: Transport
    conn: Any = None  # TcpConnection, or the UDP endpoint
    addr: Any = None  # UDP source address
    udp_request_id: int = 0
    request_id: int = -1  # pipeline request id, set when the request enters ingress
    binary: bool = False
    close_after: bool = False


@dataclass
class TcpFramer:
    """Splits a TCP byte stream at request boundaries.

    Binary requests end where the header's body length says; ASCII
    requests at CRLF, plus ``value_length + 2`` more bytes for a set.
    When the stream can't be framed, ``feed`` returns what it has as a
    last message and sets ``failed``; later bytes are ignored.
    """

    max_key: int = MAX_KEY
    max_value: int = 8192
    buf: bytearray = field(default_factory=bytearray)
    failed: bool = False

    def feed(self, data: bytes) -> list[bytes]:
        if self.failed:
            return []
        self.buf += data
        out = []
        while self.buf:
            msg = self._next()
            if msg is None:
                break
            out.append(msg)
            if self.failed:
                self.buf.clear()
                break
        return out

    def _next(self) -> Optional[bytes]:
        buf = self.buf
        if buf[0] == REQUEST_MAGIC:
            if len(buf) < HEADER_LEN:
                return None
            blen = HEADER.unpack_from(buf)[6]
            if blen > self.max_value + self.max_key + 8:
                # don't wait for a body we would reject anyway
                return self._fail(HEADER_LEN)
            end = HEADER_LEN + blen
        else:
            eol = buf.find(b"\r\n", 0, MAX_LINE + 2)
            if eol < 0:
                if len(buf) > MAX_LINE:
                    return self._fail(MAX_LINE + 1)
                return None
            end = eol + 2
            if buf[:4].lower() == b"set ":
                parts = bytes(buf[:eol]).split(b" ")
                if len(parts) != 5 or not parts[4].isdigit():
                    return self._fail(end)
                n = int(parts[4])
                if n > self.max_value:
                    return self._fail(end)
                end += n + 2
        if len(buf) < end:
            return None
        msg = bytes(buf[:end])
        del buf[:end]
        return msg

    def _fail(self, n: int) -> bytes:
        self.failed = True
        msg = bytes(self.buf[:n])
        del self.buf[:n]
        return msg


def parse_udp(datagram: bytes) -> Optional[tuple[UdpFrameHeader, bytes]]:
    """Split a datagram into frame header and request; None means drop it."""
    if len(datagram) <= UDP_HEADER.size:
        return None
    hdr = UdpFrameHeader.unpack(datagram)
    if hdr.total_datagrams != 1 or hdr.sequence != 0:
        return None
    return hdr, datagram[UDP_HEADER.size :]


def udp_response(tag: ClientTag, response: bytes) -> bytes:
    """One response datagram; responses that don't fit become a too-large error."""
    head = UdpFrameHeader(tag.udp_request_id).pack()
    if len(head) + len(response) > UDP_MAX_DATAGRAM:
        if tag.binary:
            fields = list(HEADER.unpack_from(response))
            fields[3] = 0  # extras length
            fields[5] = BINARY_STATUS_TOO_LARGE
            fields[6] = 0  # body length
            response = HEADER.pack(*fields)
        else:
            response = UDP_TOO_LARGE
    return head + response


class FrontEnd:
    """Owns the pipeline's two open ends and the ClientTag FIFO."""

    def __init__(self, pipeline: Pipeline, loop: Optional[asyncio.AbstractEventLoop] = None):
        self.pipeline = pipeline
        self.loop = loop
        self.backlog: deque[tuple[ClientTag, bytes]] = deque()
        self.tags: deque[ClientTag] = deque()  # in pipeline order
        self.udp_dropped = 0
        self.responses_dropped = 0
        self._done_ids: deque[int] = deque()
        pipeline.formatter.on_complete = lambda resp: self._done_ids.append(resp.meta.request_id)
        self._words: list = []
        self._wpos = 0
        self._out_words: list = []
        self._scheduled = False
        self._paused: set = set()
        self._next_rid = pipeline.parser.next_id

    # -- ingest ---------------------------------------------------------------

    def submit(self, tag: ClientTag, request: bytes) -> None:
        self.backlog.append((tag, request))
        if len(self.backlog) >= BACKLOG_LIMIT and tag.transport is Transport.TCP:
            tag.conn.pause()
            self._paused.add(tag.conn)
        self.schedule()

    def submit_udp(self, tag: ClientTag, request: bytes) -> bool:
        """Queue a UDP request unless the pipeline is backed up; False if dropped."""
        if self.backlog or self.pipeline.ingress.full():
            self.udp_dropped += 1
            return False
        self.submit(tag, request)
        return True

    def _feed(self) -> bool:
        ingress = self.pipeline.ingress
        moved = False
        while True:
            if self._wpos == len(self._words):
                if not self.backlog:
                    break
                tag, request = self.backlog.popleft()
                # sole producer: the parser numbers messages in this order
                tag.request_id = self._next_rid
                self._next_rid += 1
                self.tags.append(tag)
                self._words = pack_words(request)
                self._wpos = 0
            k = ingress.write_many(self._words, self._wpos)
            if not k:
                break
            self._wpos += k
            moved = True
        if self._paused and len(self.backlog) < BACKLOG_LIMIT // 2:
            for conn in self._paused:
                conn.resume()
            self._paused.clear()
        return moved

    # -- egress ---------------------------------------------------------------

    def _drain(self) -> bool:
        egress = self.pipeline.egress
        words = egress.read_many(egress.capacity)
        if not words:
            return False
        out = self._out_words
        for w in words:
            out.append(w)
            if w[2]:
                self._deliver(unpack_words(out))
                out.clear()
        return True

    def _deliver(self, response: bytes) -> None:
        tag = self.tags.popleft()
        rid = self._done_ids.popleft()
        if rid != tag.request_id:
            raise PipelineFault(f"response for request {rid} arrived where {tag.request_id} was due")
        if tag.transport is Transport.UDP:
            tag.conn.send(udp_response(tag, response), tag.addr)
            return
        if not tag.conn.write(response, tag.close_after):
            self.responses_dropped += 1

    # -- scheduling -------------------------------------------------------------

    def schedule(self) -> None:
        if not self._scheduled and self.loop is not None:
            self._scheduled = True
            self.loop.call_soon(self.pump)

    def pump(self) -> None:
        """Feed, run and drain for a bounded number of rounds, then yield to the event loop."""
        self._scheduled = False
        run_round = self.pipeline.run_round
        for _ in range(ROUNDS_PER_TICK):
            moved = self._feed()
            moved = run_round() or moved
            moved = self._drain() or moved
            if not moved and not self.backlog and self._wpos == len(self._words) and self.pipeline.idle():
                return
        self.schedule()

    def run_until_idle(self, max_rounds: int = 1_000_000) -> None:
        """Synchronous pump for tests without an event loop."""
        for _ in range(max_rounds):
            moved = self._feed()
            moved = self.pipeline.run_round() or moved
            moved = self._drain() or moved
            if not moved and not self.backlog and not self.tags:
                return
        raise PipelineFault("front-end did not go idle")


class TcpConnection(asyncio.Protocol):
    def __init__(self, front: FrontEnd, cfg: PipelineConfig):
        self.front = front
        self.framer = TcpFramer(cfg.max_key, cfg.max_value)
        self.transport: Optional[asyncio.Transport] = None
        self.closed = False

    def connection_made(self, transport) -> None:
        self.transport = transport

    def connection_lost(self, exc) -> None:
        self.closed = True

    def data_received(self, data: bytes) -> None:
        msgs = self.framer.feed(data)
        for i, msg in enumerate(msgs):
            tag = ClientTag(Transport.TCP, self, binary=msg[0] == REQUEST_MAGIC)
            # only the unframeable tail ends the connection
            tag.close_after = self.framer.failed and i == len(msgs) - 1
            self.front.submit(tag, msg)

    def pause(self) -> None:
        if not self.closed:
            self.transport.pause_reading()

    def resume(self) -> None:
        if not self.closed:
            self.transport.resume_reading()

    def eof_received(self) -> None:
        return None  # close our side too

    def write(self, data: bytes, close_after: bool = False) -> bool:
        if self.closed or self.transport.is_closing():
            return False
        self.transport.write(data)
        if close_after:
            self._hang_up()
        return True

    def _hang_up(self) -> None:
        # Closing with the client's unread bytes still queued would send a
        # reset, which can discard the response just written. Send FIN,
        # keep reading (the failed framer ignores it), close once the peer does.
        self.closed = True
        t = self.transport
        if not t.can_write_eof():
            t.close()
            return
        t.write_eof()
        t.resume_reading()
        asyncio.get_running_loop().call_later(CLOSE_GRACE_S, t.close)


class UdpEndpoint(asyncio.DatagramProtocol):
    def __init__(self, front: FrontEnd):
        self.front = front
        self.transport: Optional[asyncio.DatagramTransport] = None

    def connection_made(self, transport) -> None:
        self.transport = transport

    def datagram_received(self, data: bytes, addr) -> None:
        parsed = parse_udp(data)
        if parsed is None:
            self.front.udp_dropped += 1
            return
        hdr, request = parsed
        tag = ClientTag(Transport.UDP, self, addr, hdr.request_id, binary=request[0] == REQUEST_MAGIC)
        self.front.submit_udp(tag, request)

    def send(self, data: bytes, addr) -> None:
        if self.transport is not None and not self.transport.is_closing():
            self.transport.sendto(data, addr)


class Server:
    """memcached-compatible server over one pipeline. Port 0 picks a free port."""

    def __init__(self, cfg: Optional[PipelineConfig] = None, host: str = "127.0.0.1",
                 tcp_port: int = DEFAULT_PORT, udp_port: Optional[int] = DEFAULT_PORT):
        self.cfg = cfg if cfg is not None else PipelineConfig()
        self.host = host
        self.tcp_port = tcp_port
        self.udp_port = udp_port
        self.pipeline = build_pipeline(self.cfg)
        self.front: Optional[FrontEnd] = None
        self._tcp = None
        self._udp = None

    async def start(self) -> None:
        loop = asyncio.get_running_loop()
        self.front = FrontEnd(self.pipeline, loop)
        self._tcp = await loop.create_server(lambda: TcpConnection(self.front, self.cfg), self.host, self.tcp_port)
        self.tcp_port = self._tcp.sockets[0].getsockname()[1]
        if self.udp_port is not None:
            self._udp, _ = await loop.create_datagram_endpoint(
                lambda: UdpEndpoint(self.front), local_addr=(self.host, self.udp_port)
            )
            self.udp_port = self._udp.get_extra_info("sockname")[1]
        log.info("listening on %s tcp %s udp %s", self.host, self.tcp_port, self.udp_port)

    async def serve_forever(self) -> None:
        await self.start()
        try:
            await self._tcp.serve_forever()
        finally:
            self.close()

    def close(self) -> None:
        if self._tcp is not None:
            self._tcp.close()
        if self._udp is not None:
            self._udp.close()


class ServerThread:
    """Runs a Server on its own event loop thread; for tests and the bench CLI."""

    def __init__(self, cfg: Optional[PipelineConfig] = None, host: str = "127.0.0.1",
                 tcp_port: int = 0, udp_port: Optional[int] = 0):
        self.server = Server(cfg, host, tcp_port, udp_port)
        self.loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self.loop.run_forever, name="flowcache-server", daemon=True)

    def start(self) -> "ServerThread":
        self._thread.start()
        asyncio.run_coroutine_threadsafe(self.server.start(), self.loop).result(timeout=10)
        return self

    def stop(self) -> None:
        self.loop.call_soon_threadsafe(self.server.close)
        self.loop.call_soon_threadsafe(self.loop.stop)
        self._thread.join(timeout=10)

    @property
    def address(self) -> tuple[str, int]:
        return self.server.host, self.server.tcp_port

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

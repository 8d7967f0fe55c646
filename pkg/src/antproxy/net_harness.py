"""Layer-3 interception point: simulated TUN plus scripted remote endpoints.

TunPort is an in-memory pair of datagram queues exchanging whole IP packets,
mirroring a real TUN device closely enough that the forwarder cannot tell the
difference.  Reads block until a datagram arrives (no poll-and-sleep loops);
writes deliver atomically or raise.

SimNet stands in for the internet: scripted endpoints (echo server, file
server, byte sink) listen on real loopback sockets, and a routing table maps
the virtual addresses apps dial to those loopback addresses.  Running the
external leg over OS sockets keeps the forwarder code identical between
simulation and a real host, and loopback is fast enough for throughput work.
Determinism: all scripted content derives from seeds, so two runs with equal
scripts move byte-identical streams.
"""

from __future__ import annotations

import hashlib
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .packet import PROTO_TCP, PROTO_UDP, FlowKey

DEFAULT_MTU = 16384


class HarnessError(Exception):
    pass


class PortClosed(HarnessError):
    pass


class OversizeDatagram(HarnessError):
    pass


class DuplicateEndpoint(HarnessError):
    pass


class _DatagramQueue:
    """Unbounded FIFO of whole datagrams with blocking get and close."""

    def __init__(self):
        self._items: deque[bytes] = deque()
        self._cond = threading.Condition()
        self._closed = False

    def put(self, item: bytes) -> None:
        with self._cond:
            if self._closed:
                raise PortClosed("port is closed")
            self._items.append(item)
            self._cond.notify()

    def get(self, timeout: Optional[float] = None) -> Optional[bytes]:
        with self._cond:
            if timeout is None:
                while not self._items and not self._closed:
                    self._cond.wait()
            else:
                deadline = time.monotonic() + timeout
                while not self._items and not self._closed:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return None
                    self._cond.wait(remaining)
            if self._items:
                return self._items.popleft()
            raise PortClosed("port is closed")

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


class TunPort:
    """Two-sided virtual TUN: the app side injects datagrams the engine reads,
    and datagrams the engine writes come back out on the app side.

    Every exchange is one whole IP datagram of at most mtu bytes; nothing is
    ever split or concatenated.
    """

    def __init__(self, mtu: int = DEFAULT_MTU):
        self.mtu = mtu
        self._to_engine = _DatagramQueue()
        self._to_app = _DatagramQueue()

    # engine side
    def read(self, timeout: Optional[float] = None) -> Optional[bytes]:
        """Block until the app side injects a datagram; None on timeout."""
        return self._to_engine.get(timeout)

    def write(self, datagram: bytes) -> None:
        if len(datagram) > self.mtu:
            raise OversizeDatagram(f"{len(datagram)} bytes > mtu {self.mtu}")
        self._to_app.put(bytes(datagram))

    # app side
    def app_inject(self, datagram: bytes) -> None:
        if len(datagram) > self.mtu:
            raise OversizeDatagram(f"{len(datagram)} bytes > mtu {self.mtu}")
        self._to_engine.put(bytes(datagram))

    def app_read(self, timeout: Optional[float] = None) -> Optional[bytes]:
        return self._to_app.get(timeout)

    def close(self) -> None:
        self._to_engine.close()
        self._to_app.close()

    @property
    def closed(self) -> bool:
        return self._to_engine._closed


def tun_read(port: TunPort, buffer) -> int:
    """Read one whole datagram into ``buffer``; returns its length."""
    if len(buffer) < port.mtu:
        raise ValueError("buffer capacity below port mtu")
    data = port.read()
    buffer[: len(data)] = data
    return len(data)


def tun_write(port: TunPort, datagram: bytes) -> None:
    port.write(datagram)


# ---------------------------------------------------------------------------
# deterministic content

_BLOCK_CACHE: dict = {}
_CONTENT_BLOCK = 4 * 1024 * 1024


def content_block(seed: int, size: int = _CONTENT_BLOCK) -> bytes:
    """Seeded pseudo-random block, cached; endpoint payloads tile it."""
    key = (seed, size)
    block = _BLOCK_CACHE.get(key)
    if block is None:
        block = np.random.Generator(np.random.PCG64(seed)).bytes(size)
        _BLOCK_CACHE[key] = block
    return block


def stream_hash(seed: int, total: int) -> str:
    """sha256 of the ``total``-byte stream a file endpoint with ``seed`` serves."""
    block = content_block(seed)
    h = hashlib.sha256()
    off = 0
    while off < total:
        n = min(len(block), total - off)
        h.update(block[:n])
        off += n
    return h.hexdigest()


# ---------------------------------------------------------------------------
# scripted endpoints


@dataclass(frozen=True)
class ExternalRoute:
    """Where a virtual destination actually lives, plus link emulation."""

    address: tuple[str, int]
    latency_s: float = 0.0


class _Endpoint:
    def __init__(self, sim: "SimNet", ip: str, port: int, latency_s: float):
        self.sim = sim
        self.ip = ip
        self.port = port
        self.latency_s = latency_s
        self.bytes_in = 0
        self.bytes_out = 0
        self._lock = threading.Lock()
        self.real_addr: Optional[tuple[str, int]] = None

    def account(self, inn: int = 0, out: int = 0) -> None:
        with self._lock:
            self.bytes_in += inn
            self.bytes_out += out


class _TcpEndpoint(_Endpoint):
    def __init__(self, sim, ip, port, handler: Callable, latency_s: float):
        super().__init__(sim, ip, port, latency_s)
        self.handler = handler
        self._listener: Optional[socket.socket] = None
        self._threads: list[threading.Thread] = []
        self._conns: list[socket.socket] = []

    def start(self) -> None:
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(("127.0.0.1", 0))
        self._listener.listen(256)
        self.real_addr = self._listener.getsockname()
        t = threading.Thread(target=self._accept_loop, daemon=True,
                             name=f"sim-tcp-{self.ip}:{self.port}")
        t.start()
        self._threads.append(t)

    def _accept_loop(self) -> None:
        while True:
            try:
                conn, _peer = self._listener.accept()
            except OSError:
                return
            self._conns.append(conn)
            t = threading.Thread(target=self._serve, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve(self, conn: socket.socket) -> None:
        try:
            if self.latency_s:
                time.sleep(self.latency_s)
            self.handler(self, conn)
        except OSError:
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def stop(self) -> None:
        # a blocked accept or recv is not woken by close() from another
        # thread on linux, and the freed fd number could be handed to a
        # later socket while the stale call still waits on it.  Shut the
        # sockets down first so every loop observes EOF, join the loops,
        # and only then release the fds.
        if self._listener is not None:
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        for conn in self._conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        for t in list(self._threads):
            t.join(timeout=2.0)
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        for conn in self._conns:
            try:
                conn.close()
            except OSError:
                pass


class _UdpEndpoint(_Endpoint):
    def __init__(self, sim, ip, port, latency_s: float, loss: float, seed: int):
        super().__init__(sim, ip, port, latency_s)
        self.loss = loss
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self._sock: Optional[socket.socket] = None
        self._thread: Optional[threading.Thread] = None
        self._closing = False

    def start(self) -> None:
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind(("127.0.0.1", 0))
        self.real_addr = self._sock.getsockname()
        self._thread = threading.Thread(target=self._loop, daemon=True,
                                        name=f"sim-udp-{self.ip}:{self.port}")
        self._thread.start()

    def _loop(self) -> None:
        while True:
            try:
                data, peer = self._sock.recvfrom(65535)
            except OSError:
                return
            if self._closing:
                return
            self.account(inn=len(data))
            if self.loss and self.rng.random() < self.loss:
                continue
            if self.latency_s:
                time.sleep(self.latency_s)
            try:
                self._sock.sendto(data, peer)
                self.account(out=len(data))
            except OSError:
                pass

    def stop(self) -> None:
        if self._sock is not None:
            # same close-vs-blocked-recv hazard as the TCP endpoint: poke
            # the socket so the loop wakes, join it, then release the fd
            self._closing = True
            try:
                wake = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
                wake.sendto(b"", self.real_addr)
                wake.close()
            except OSError:
                pass
            if self._thread is not None:
                self._thread.join(timeout=2.0)
            try:
                self._sock.close()
            except OSError:
                pass


def _echo_handler(ep: _TcpEndpoint, conn: socket.socket) -> None:
    while True:
        data = conn.recv(65536)
        if not data:
            return
        ep.account(inn=len(data))
        conn.sendall(data)
        ep.account(out=len(data))


def _file_handler(size: int, seed: int):
    def handler(ep: _TcpEndpoint, conn: socket.socket) -> None:
        block = content_block(seed)
        off = 0
        while off < size:
            n = min(len(block), size - off)
            conn.sendall(block[:n])
            off += n
        ep.account(out=size)
        conn.shutdown(socket.SHUT_WR)
        # drain until the peer closes so the close is clean
        while conn.recv(65536):
            pass

    return handler


def _sink_handler(ep: _TcpEndpoint, conn: socket.socket) -> None:
    h = hashlib.sha256()
    total = 0
    while True:
        data = conn.recv(262144)
        if not data:
            break
        total += len(data)
        h.update(data)
    ep.account(inn=total)
    digest = h.hexdigest().encode("ascii") + b"\n"
    conn.sendall(digest)
    ep.account(out=len(digest))


class SimNet:
    """Registry of scripted endpoints plus the virtual-address routing table."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._endpoints: dict[tuple[str, int, int], _Endpoint] = {}
        self._started = False
        self._lock = threading.Lock()

    def _register(self, proto: int, ep: _Endpoint) -> _Endpoint:
        key = (ep.ip, ep.port, proto)
        with self._lock:
            if key in self._endpoints:
                raise DuplicateEndpoint(f"{ep.ip}:{ep.port}/{proto} already scripted")
            self._endpoints[key] = ep
        if self._started:
            ep.start()
        return ep

    def add_tcp_echo(self, ip: str, port: int, latency_ms: float = 0.0) -> _Endpoint:
        return self._register(
            PROTO_TCP, _TcpEndpoint(self, ip, port, _echo_handler, latency_ms / 1000)
        )

    def add_tcp_file(
        self, ip: str, port: int, size: int, seed: Optional[int] = None,
        latency_ms: float = 0.0,
    ) -> _Endpoint:
        if seed is None:
            seed = self.seed
        ep = _TcpEndpoint(self, ip, port, _file_handler(size, seed), latency_ms / 1000)
        ep.file_size = size
        ep.file_seed = seed
        return self._register(PROTO_TCP, ep)

    def add_tcp_sink(self, ip: str, port: int, latency_ms: float = 0.0) -> _Endpoint:
        return self._register(
            PROTO_TCP, _TcpEndpoint(self, ip, port, _sink_handler, latency_ms / 1000)
        )

    def add_udp_echo(
        self, ip: str, port: int, latency_ms: float = 0.0, loss: float = 0.0
    ) -> _Endpoint:
        return self._register(
            PROTO_UDP,
            _UdpEndpoint(self, ip, port, latency_ms / 1000, loss, self.seed),
        )

    def start(self) -> None:
        with self._lock:
            endpoints = list(self._endpoints.values())
            self._started = True
        for ep in endpoints:
            if ep.real_addr is None:
                ep.start()

    def stop(self) -> None:
        with self._lock:
            endpoints = list(self._endpoints.values())
            self._started = False
        for ep in endpoints:
            ep.stop()

    def route(self, key: FlowKey) -> Optional[ExternalRoute]:
        """Resolve a virtual destination to its loopback home; None if unknown."""
        ep = self._endpoints.get((key.dst_ip, key.dst_port, key.protocol))
        if ep is None or ep.real_addr is None:
            return None
        return ExternalRoute(address=ep.real_addr, latency_s=ep.latency_s)

    def endpoint(self, ip: str, port: int, proto: int = PROTO_TCP) -> _Endpoint:
        return self._endpoints[(ip, port, proto)]

    def total_bytes(self) -> int:
        """External-leg bytes over all endpoints (telemetry overhead audits)."""
        return sum(ep.bytes_in + ep.bytes_out for ep in self._endpoints.values())

    def __enter__(self) -> "SimNet":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def sim_endpoint_register(net: SimNet, spec: dict) -> None:
    """Script-style registration: {'kind', 'ip', 'port', ...} -> endpoint."""
    kind = spec["kind"]
    if kind == "echo":
        net.add_tcp_echo(spec["ip"], spec["port"], spec.get("latency_ms", 0.0))
    elif kind == "file":
        net.add_tcp_file(spec["ip"], spec["port"], spec["size"], spec.get("seed"),
                         spec.get("latency_ms", 0.0))
    elif kind == "sink":
        net.add_tcp_sink(spec["ip"], spec["port"], spec.get("latency_ms", 0.0))
    elif kind == "udp_echo":
        net.add_udp_echo(spec["ip"], spec["port"], spec.get("latency_ms", 0.0),
                         spec.get("loss", 0.0))
    else:
        raise HarnessError(f"unknown endpoint kind {kind!r}")


# ---------------------------------------------------------------------------
# trace replay

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D


@dataclass(frozen=True)
class TracePacket:
    timestamp: float
    data: bytes
    direction: Optional[str] = None  # "up"/"down" when the capture says


def _load_classic_pcap(raw: bytes) -> list[TracePacket]:
    magic = struct.unpack_from("<I", raw, 0)[0]
    if magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
        endian = "<"
    else:
        magic = struct.unpack_from(">I", raw, 0)[0]
        if magic not in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
            raise HarnessError("not a pcap file")
        endian = ">"
    divisor = 1e9 if magic == PCAP_MAGIC_NS else 1e6
    packets = []
    off = 24
    while off + 16 <= len(raw):
        sec, frac, caplen, _origlen = struct.unpack_from(endian + "IIII", raw, off)
        off += 16
        packets.append(TracePacket(sec + frac / divisor, raw[off : off + caplen]))
        off += caplen
    return packets


def load_trace(path) -> list[TracePacket]:
    """Read packets (with timestamps) from a pcap or pcapng file."""
    from pathlib import Path

    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise HarnessError("file too short to be a capture")
    if struct.unpack_from("<I", raw, 0)[0] == 0x0A0D0D0A:
        from .capture_log import read_capture

        return [
            TracePacket(p.timestamp, p.data, p.annotations.get("direction"))
            for p in read_capture(path)
        ]
    return _load_classic_pcap(raw)


def replay_trace(
    tun: TunPort, packets: Iterable[TracePacket], speed: float = 0.0
) -> int:
    """Inject app-side datagrams into the TUN.

    Packets annotated direction=down are skipped (they were engine output).
    speed <= 0 replays at maximum speed; speed 1.0 keeps original pacing,
    2.0 replays twice as fast, and so on.
    """
    injected = 0
    prev_ts: Optional[float] = None
    for pkt in packets:
        if pkt.direction == "down":
            continue
        if speed > 0 and prev_ts is not None and pkt.timestamp > prev_ts:
            time.sleep((pkt.timestamp - prev_ts) / speed)
        prev_ts = pkt.timestamp
        tun.app_inject(pkt.data)
        injected += 1
    return injected

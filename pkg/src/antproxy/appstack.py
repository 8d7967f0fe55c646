"""Minimal client TCP/UDP stack for the app side of a TunPort.

This is the traffic generator used by the test suite and the bench scenarios:
it speaks just enough TCP to exercise the engine (handshake, MSS option,
windowed sends, immediate cumulative ACKs, half close) without pretending to
be a general stack.  It assumes the in-memory TUN delivers datagrams in
order and without loss, so there is no retransmission logic.

Flow control is real in both directions.  Sends block while the engine's
advertised window is full, and the receive window we advertise shrinks as
unread bytes accumulate, so a 500 MB transfer never holds more than a
window's worth of data in memory on either side.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from typing import Optional

from .net_harness import PortClosed, TunPort
from .packet import (
    PROTO_TCP,
    PROTO_UDP,
    Datagram,
    PacketError,
    TcpFlags,
    UnsupportedProtocol,
    mss_option_bytes,
    parse_datagram,
    seq_add,
    seq_leq,
    seq_lt,
    seq_sub,
    serialize_datagram,
    tcp_datagram,
    udp_datagram,
)

RECV_WINDOW = 65535


class AppStackError(Exception):
    pass


class ConnectFailed(AppStackError):
    pass


class ConnectionReset(AppStackError):
    pass


class SendStalled(AppStackError):
    pass


def parse_mss_option(options: bytes) -> Optional[int]:
    i = 0
    n = len(options)
    while i < n:
        kind = options[i]
        if kind == 0:
            break
        if kind == 1:
            i += 1
            continue
        if i + 1 >= n:
            break
        length = options[i + 1]
        if length < 2 or i + length > n:
            break
        if kind == 2 and length == 4:
            return int.from_bytes(options[i + 2 : i + 4], "big")
        i += length
    return None


class AppTcpSocket:
    """One client connection, driven by the owning stack's dispatcher."""

    def __init__(self, stack: "AppStack", local_port: int, dst_ip: str, dst_port: int):
        self.stack = stack
        self.local_port = local_port
        self.dst_ip = dst_ip
        self.dst_port = dst_port
        self._lock = threading.Lock()
        self._cv = threading.Condition(self._lock)
        self.iss = (hash((local_port, dst_port)) & 0x0FFFFFFF) | 0x10000000
        self.snd_nxt = self.iss
        self.snd_una = self.iss
        self.rcv_nxt = 0
        self.peer_window = 0
        self.mss = 1460
        self.established = False
        self.fin_sent = False
        self.fin_received = False
        self.reset = False
        self._recv_buf: deque = deque()
        self._recv_bytes = 0
        self._advertised = RECV_WINDOW
        self._user_closed = False

    # -- wire helpers (callers hold no lock; seq state under self._lock) --

    def _window(self) -> int:
        return max(0, RECV_WINDOW - self._recv_bytes)

    def _inject(self, flags: TcpFlags, payload: bytes = b"", options: bytes = b"",
                seq: Optional[int] = None) -> None:
        d = tcp_datagram(
            src_ip=self.stack.ip,
            src_port=self.local_port,
            dst_ip=self.dst_ip,
            dst_port=self.dst_port,
            seq=self.snd_nxt if seq is None else seq,
            ack=self.rcv_nxt,
            flags=flags,
            window=self._window(),
            payload=payload,
            options=options,
        )
        self._advertised = self._window()
        self.stack.tun.app_inject(serialize_datagram(d))

    # -- public API --------------------------------------------------------

    def connect(self, timeout: float = 5.0) -> "AppTcpSocket":
        with self._cv:
            self._inject(TcpFlags.SYN, options=mss_option_bytes(65495))
            self.snd_nxt = seq_add(self.snd_nxt, 1)
            deadline = time.monotonic() + timeout
            while not self.established and not self.reset:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise ConnectFailed(f"connect to {self.dst_ip}:{self.dst_port} timed out")
                self._cv.wait(left)
            if self.reset:
                raise ConnectFailed(f"connect to {self.dst_ip}:{self.dst_port} refused")
        return self

    def send(self, data: bytes, timeout: float = 30.0) -> int:
        view = memoryview(data)
        total = len(view)
        sent = 0
        with self._cv:
            while sent < total:
                if self.reset:
                    raise ConnectionReset("connection reset by engine")
                in_flight = seq_sub(self.snd_nxt, self.snd_una)
                budget = self.peer_window - in_flight
                if budget <= 0:
                    if not self._cv.wait(timeout):
                        raise SendStalled("no ack progress")
                    continue
                seg = min(budget, self.mss, total - sent)
                payload = bytes(view[sent : sent + seg])
                self._inject(TcpFlags.ACK | TcpFlags.PSH, payload=payload)
                self.snd_nxt = seq_add(self.snd_nxt, seg)
                sent += seg
        return sent

    def recv(self, max_bytes: int = 65536, timeout: Optional[float] = 30.0) -> bytes:
        with self._cv:
            deadline = None if timeout is None else time.monotonic() + timeout
            while not self._recv_buf:
                if self.fin_received:
                    return b""
                if self.reset:
                    raise ConnectionReset("connection reset by engine")
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    raise TimeoutError("recv timed out")
                self._cv.wait(left)
            out = bytearray()
            while self._recv_buf and len(out) < max_bytes:
                chunk = self._recv_buf[0]
                take = min(len(chunk), max_bytes - len(out))
                out += chunk[:take]
                if take == len(chunk):
                    self._recv_buf.popleft()
                else:
                    self._recv_buf[0] = chunk[take:]
            self._recv_bytes -= len(out)
            # reopen the window if our earlier advertisement was pinched
            if self._advertised < RECV_WINDOW // 2 and self._window() > self._advertised:
                self._inject(TcpFlags.ACK)
            return bytes(out)

    def recv_all(self, timeout: Optional[float] = 30.0) -> bytes:
        parts = []
        while True:
            chunk = self.recv(1 << 20, timeout=timeout)
            if not chunk:
                return b"".join(parts)
            parts.append(chunk)

    def shutdown_write(self) -> None:
        with self._cv:
            if self.fin_sent or self.reset:
                return
            self._inject(TcpFlags.FIN | TcpFlags.ACK)
            self.snd_nxt = seq_add(self.snd_nxt, 1)
            self.fin_sent = True

    def close(self) -> None:
        self.shutdown_write()
        with self._cv:
            self._user_closed = True
            done = self.fin_received or self.reset
        # stay registered until the engine's own FIN arrives, so its close
        # handshake gets the final ack it is waiting for
        if done:
            self.stack._forget(PROTO_TCP, self.local_port)

    # -- dispatcher callbacks ---------------------------------------------

    def _handle(self, d: Datagram) -> None:
        seg = d.transport
        with self._cv:
            self.peer_window = seg.window
            if seg.flags & TcpFlags.RST:
                self.reset = True
                self._cv.notify_all()
                return
            if seg.flags & TcpFlags.SYN and seg.flags & TcpFlags.ACK:
                if not self.established:
                    self.rcv_nxt = seq_add(seg.seq, 1)
                    self.snd_una = seg.ack
                    mss = parse_mss_option(seg.options)
                    if mss:
                        self.mss = mss
                    self.established = True
                self._inject(TcpFlags.ACK)
                self._cv.notify_all()
                return
            if seg.flags & TcpFlags.ACK:
                if seq_lt(self.snd_una, seg.ack) and seq_leq(seg.ack, self.snd_nxt):
                    self.snd_una = seg.ack
                    self._cv.notify_all()
            advanced = False
            if d.payload:
                if seg.seq == self.rcv_nxt:
                    self._recv_buf.append(d.payload)
                    self._recv_bytes += len(d.payload)
                    self.rcv_nxt = seq_add(self.rcv_nxt, len(d.payload))
                    advanced = True
                else:
                    self._inject(TcpFlags.ACK)
                    return
            if seg.flags & TcpFlags.FIN:
                fin_seq = seq_add(seg.seq, len(d.payload))
                if fin_seq == self.rcv_nxt and not self.fin_received:
                    self.rcv_nxt = seq_add(self.rcv_nxt, 1)
                    self.fin_received = True
                    advanced = True
            if advanced:
                self._inject(TcpFlags.ACK)
                self._cv.notify_all()
            if self._user_closed and (self.fin_received or self.reset):
                self.stack._forget(PROTO_TCP, self.local_port)


class AppUdpSocket:
    def __init__(self, stack: "AppStack", local_port: int, dst_ip: str, dst_port: int):
        self.stack = stack
        self.local_port = local_port
        self.dst_ip = dst_ip
        self.dst_port = dst_port
        self._cv = threading.Condition()
        self._queue: deque = deque()

    def send(self, payload: bytes) -> None:
        d = udp_datagram(
            src_ip=self.stack.ip,
            src_port=self.local_port,
            dst_ip=self.dst_ip,
            dst_port=self.dst_port,
            payload=payload,
        )
        self.stack.tun.app_inject(serialize_datagram(d))

    def recv(self, timeout: Optional[float] = 5.0) -> Optional[bytes]:
        with self._cv:
            deadline = None if timeout is None else time.monotonic() + timeout
            while not self._queue:
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    return None
                self._cv.wait(left)
            return self._queue.popleft()

    def close(self) -> None:
        self.stack._forget(PROTO_UDP, self.local_port)

    def _handle(self, d: Datagram) -> None:
        with self._cv:
            self._queue.append(d.payload)
            self._cv.notify_all()


class AppStack:
    """Dispatches datagrams from the app side of a TunPort to sockets."""

    def __init__(self, tun: TunPort, ip: str = "10.0.2.15"):
        self.tun = tun
        self.ip = ip
        self._sockets: dict = {}
        self._lock = threading.Lock()
        self._next_port = 40000
        self._running = True
        self.unmatched = 0
        self._thread = threading.Thread(
            target=self._dispatch_loop, name="appstack-dispatch", daemon=True
        )
        self._thread.start()

    def _alloc_port(self) -> int:
        with self._lock:
            self._next_port += 1
            return self._next_port

    def tcp_connect(self, dst_ip: str, dst_port: int, timeout: float = 5.0) -> AppTcpSocket:
        port = self._alloc_port()
        sock = AppTcpSocket(self, port, dst_ip, dst_port)
        with self._lock:
            self._sockets[(PROTO_TCP, port)] = sock
        try:
            sock.connect(timeout=timeout)
        except AppStackError:
            self._forget(PROTO_TCP, port)
            raise
        return sock

    def udp_open(self, dst_ip: str, dst_port: int) -> AppUdpSocket:
        port = self._alloc_port()
        sock = AppUdpSocket(self, port, dst_ip, dst_port)
        with self._lock:
            self._sockets[(PROTO_UDP, port)] = sock
        return sock

    def _forget(self, proto: int, port: int) -> None:
        with self._lock:
            self._sockets.pop((proto, port), None)

    def close(self) -> None:
        self._running = False
        self._thread.join(timeout=5.0)

    def _dispatch_loop(self) -> None:
        while self._running:
            try:
                wire = self.tun.app_read(timeout=0.2)
            except PortClosed:
                break
            if wire is None:
                continue
            try:
                d = parse_datagram(wire)
            except (PacketError, UnsupportedProtocol):
                self.unmatched += 1
                continue
            # engine-to-app datagrams arrive addressed to us
            proto = d.ip.protocol
            with self._lock:
                sock = self._sockets.get((proto, d.transport.dst_port))
            if sock is None:
                self.unmatched += 1
                continue
            sock._handle(d)

"""Mobile-only routing core: layer-3 datagrams in, layer-4 sockets out.

Exactly two forwarding workers, regardless of flow count.  Worker A blocks on
the TUN, parses each datagram, and hands it to worker B over a bounded queue
(drops are counted, never blocking).  Worker B owns everything else: the TCP
connection table, the single shared UDP socket, one selectors readiness loop
across all external sockets, and every TUN write.  Single-owner state means
the hot path takes no locks.

TCP is proxied split-connection style.  The engine answers the app's SYN
itself (advertising MSS = mtu - 40 so the app sends large segments), opens
its own outbound socket, and relays bytes between the two legs while walking
LISTEN / SYN_RECEIVED / ESTABLISHED / FIN_WAIT / CLOSE_WAIT / LAST_ACK /
CLOSED.  The SYN-ACK is withheld until the outbound connect succeeds, and a
failed connect turns into an RST, so the app never ships data the engine
cannot deliver.

All UDP flows share one external socket; replies are demultiplexed by a
remote-address reverse map (last writer wins, same shape as the paper's
reverse lookup table) and idle mappings are evicted on a timer.
"""

from __future__ import annotations

import errno
import selectors
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .capture_log import LogEvent, StorageSink
from .flow_context import FlowTable, UNKNOWN_APP
from .net_harness import ExternalRoute, OversizeDatagram, PortClosed, TunPort
from .packet import (
    PROTO_TCP,
    PROTO_UDP,
    Datagram,
    FlowKey,
    PacketError,
    TcpFlags,
    UnsupportedProtocol,
    mss_for_mtu,
    parse_datagram,
    mss_option_bytes,
    seq_add,
    seq_leq,
    seq_lt,
    seq_sub,
    serialize_datagram,
    tcp_datagram,
    udp_datagram,
)

_CONNECT_IN_PROGRESS = {errno.EINPROGRESS, errno.EWOULDBLOCK, errno.EALREADY, 0}

S_SYN_RECEIVED = "SYN_RECEIVED"
S_ESTABLISHED = "ESTABLISHED"
S_FIN_WAIT = "FIN_WAIT"
S_CLOSE_WAIT = "CLOSE_WAIT"
S_LAST_ACK = "LAST_ACK"
S_CLOSED = "CLOSED"


class ForwarderError(Exception):
    pass


class TunUnavailable(ForwarderError):
    pass


@dataclass
class ForwarderConfig:
    mtu: int = 16384
    queue_capacity: int = 512
    pending_cap: int = 1024 * 1024
    udp_idle_timeout: float = 60.0
    half_open_timeout: float = 30.0
    fd_limit: int = 1024
    udp_map_cap: int = 10000
    sweep_interval: float = 0.5


@dataclass
class Counters:
    flows_total: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    drops_icmp: int = 0
    drops_nomapping: int = 0
    drops_overflow: int = 0
    drops_malformed: int = 0
    drops_oversize: int = 0
    tcp_refused: int = 0
    send_failures: int = 0
    udp_evicted: int = 0
    dpi_blocked: int = 0


class TcpProxyConn:
    __slots__ = (
        "key", "sock", "state", "iss", "our_seq", "our_ack", "snd_una",
        "app_window", "negotiated_mss", "pending_to_net", "pending_net_bytes",
        "pending_to_app", "pending_app_bytes", "app_fin", "server_eof",
        "fin_sent", "fin_seq", "fin_acked", "shutdown_wr_done", "syn_time",
        "synack_time", "synack_due", "connect_deadline", "route",
        "want_write", "read_registered", "read_paused", "app_id", "acks_owed",
    )

    def __init__(self, key: FlowKey, sock: socket.socket, iss: int, now: float):
        self.key = key
        self.sock = sock
        self.state = S_SYN_RECEIVED
        self.iss = iss
        self.our_seq = iss
        self.our_ack = 0
        self.snd_una = iss
        self.app_window = 65535
        self.negotiated_mss = 1460
        self.pending_to_net: deque = deque()
        self.pending_net_bytes = 0
        self.pending_to_app: deque = deque()
        self.pending_app_bytes = 0
        self.app_fin = False
        self.server_eof = False
        self.fin_sent = False
        self.fin_seq = 0
        self.fin_acked = False
        self.shutdown_wr_done = False
        self.syn_time = now
        self.synack_time: Optional[float] = None
        self.synack_due: Optional[float] = None
        self.connect_deadline = now
        self.route: Optional[ExternalRoute] = None
        self.want_write = True
        self.read_registered = False
        self.read_paused = False
        self.app_id: Optional[str] = None
        self.acks_owed = 0


@dataclass
class UdpMapEntry:
    key: FlowKey
    last_activity: float
    remote: tuple


class Engine:
    """Running forwarder: two workers, counters, and a stop signal."""

    def __init__(
        self,
        tun: TunPort,
        config: Optional[ForwarderConfig] = None,
        resolver: Optional[Callable[[FlowKey], Optional[ExternalRoute]]] = None,
        dpi=None,
        sink: Optional[StorageSink] = None,
        flow_table: Optional[FlowTable] = None,
        appmap=None,
    ):
        self.tun = tun
        self.config = config or ForwarderConfig()
        self.resolver = resolver
        self.dpi = dpi
        self.sink = sink
        self.flow_table = flow_table if flow_table is not None else FlowTable()
        self.appmap = appmap
        self.counters = Counters()

        self._conns: dict[FlowKey, TcpProxyConn] = {}
        self._udp_map: dict[FlowKey, UdpMapEntry] = {}
        self._udp_reverse: dict[tuple, FlowKey] = {}
        self._udp_sock: Optional[socket.socket] = None
        self._selector = selectors.DefaultSelector()
        self._queue: deque = deque()
        self._wake_r: Optional[socket.socket] = None
        self._wake_w: Optional[socket.socket] = None
        self._threads: list[threading.Thread] = []
        self._running = False
        self._read_size = self.config.mtu - 40
        self._mss = mss_for_mtu(self.config.mtu)
        self._iss_counter = 0x1D0000
        self._ip_ident = 0
        self._fd_in_use = 0
        self._fd_peak = 0
        self._next_sweep = 0.0
        self._synack_pending: dict[FlowKey, float] = {}
        self._ack_pending: set = set()

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "Engine":
        if self._running:
            return self
        if self.tun.closed:
            raise TunUnavailable("tun port is closed")
        try:
            self._wake_r, self._wake_w = socket.socketpair()
            self._wake_r.setblocking(False)
            self._wake_w.setblocking(False)
            self._selector.register(self._wake_r, selectors.EVENT_READ, ("wake",))
            self._count_fd(2)
            self._running = True
            a = threading.Thread(target=self._worker_a, name="antproxy-fwd-a", daemon=True)
            b = threading.Thread(target=self._worker_b, name="antproxy-fwd-b", daemon=True)
            self._threads = [a, b]
            a.start()
            b.start()
        except BaseException:
            self._running = False
            self._close_plumbing()
            self._threads = []
            raise
        return self

    def stop(self) -> None:
        if not self._running:
            return
        self._running = False
        self._wake()
        for t in self._threads:
            t.join(timeout=10.0)
        self._threads = []
        for conn in list(self._conns.values()):
            self._reclaim(conn)
        if self._udp_sock is not None:
            self._unregister_quiet(self._udp_sock)
            self._udp_sock.close()
            self._udp_sock = None
            self._count_fd(-1)
        self._udp_map.clear()
        self._udp_reverse.clear()
        self._close_plumbing()

    def _close_plumbing(self) -> None:
        for s in (self._wake_r, self._wake_w):
            if s is not None:
                self._unregister_quiet(s)
                s.close()
        if self._wake_r is not None:
            self._count_fd(-2)
        self._wake_r = self._wake_w = None

    def _unregister_quiet(self, sock) -> None:
        try:
            self._selector.unregister(sock)
        except (KeyError, ValueError):
            pass

    @property
    def running(self) -> bool:
        return self._running

    def worker_count(self) -> int:
        return sum(1 for t in self._threads if t.is_alive())

    def _count_fd(self, delta: int) -> None:
        self._fd_in_use += delta
        if self._fd_in_use > self._fd_peak:
            self._fd_peak = self._fd_in_use

    @property
    def udp_socket_count(self) -> int:
        return 1 if self._udp_sock is not None else 0

    def stats(self) -> dict:
        c = self.counters
        return {
            "flows_active": len(self._conns) + len(self._udp_map),
            "flows_total": c.flows_total,
            "bytes_up": c.bytes_up,
            "bytes_down": c.bytes_down,
            "drops": {
                "icmp": c.drops_icmp,
                "nomapping": c.drops_nomapping,
                "overflow": c.drops_overflow,
                "malformed": c.drops_malformed,
                "oversize": c.drops_oversize,
            },
            "tcp_refused": c.tcp_refused,
            "send_failures": c.send_failures,
            "dpi_blocked": c.dpi_blocked,
            "fd_in_use": self._fd_in_use,
            "fd_peak": self._fd_peak,
            "udp_socket_count": self.udp_socket_count,
            "workers": self.worker_count(),
        }

    def reclaim_sockets(self) -> int:
        """Close sockets of any CLOSED conns still holding one."""
        count = 0
        for conn in list(self._conns.values()):
            if conn.state == S_CLOSED:
                self._reclaim(conn)
                count += 1
        return count

    # -- worker A: TUN reader ---------------------------------------------

    def _worker_a(self) -> None:
        cap = self.config.queue_capacity
        while self._running:
            try:
                wire = self.tun.read(timeout=0.2)
            except PortClosed:
                break
            if wire is None:
                continue
            try:
                d = parse_datagram(wire)
            except UnsupportedProtocol:
                self.counters.drops_icmp += 1
                continue
            except PacketError:
                self.counters.drops_malformed += 1
                continue
            if len(self._queue) >= cap:
                self.counters.drops_overflow += 1
                continue
            self._queue.append((wire, d))
            self._wake()

    def _wake(self) -> None:
        try:
            if self._wake_w is not None:
                self._wake_w.send(b"\x00")
        except (BlockingIOError, OSError):
            pass

    # -- worker B: multiplexer --------------------------------------------

    def _worker_b(self) -> None:
        while self._running:
            timeout = self._select_timeout()
            try:
                events = self._selector.select(timeout)
            except OSError:
                continue
            now = time.monotonic()
            for skey, mask in events:
                tag = skey.data[0]
                if tag == "wake":
                    self._drain_wake()
                elif tag == "udp":
                    self._udp_readable(now)
                elif tag == "conn":
                    conn = skey.data[1]
                    if conn.state == S_CLOSED:
                        continue
                    if mask & selectors.EVENT_WRITE:
                        self._conn_writable(conn, now)
                    if mask & selectors.EVENT_READ and conn.state != S_CLOSED:
                        self._conn_readable(conn, now)
            self._drain_tun_queue(now)
            if self._ack_pending and not self._queue:
                # quiet moment: no more app data is waiting, so the second
                # segment a held ack was waiting for is not coming right now
                self._flush_owed_acks()
            if self._synack_pending:
                self._fire_due_synacks(now)
            if now >= self._next_sweep:
                self._sweep(now)
                self._next_sweep = now + self.config.sweep_interval

    def _select_timeout(self) -> float:
        timeout = 0.05
        if self._synack_pending:
            now = time.monotonic()
            due = min(self._synack_pending.values())
            timeout = min(timeout, max(0.0, due - now))
        return timeout

    def _drain_wake(self) -> None:
        try:
            while self._wake_r.recv(4096):
                pass
        except (BlockingIOError, OSError):
            pass

    def _drain_tun_queue(self, now: float) -> None:
        q = self._queue
        while q:
            try:
                wire, d = q.popleft()
            except IndexError:
                break
            if d.ip.protocol == PROTO_TCP:
                self._handle_tcp_out(wire, d, now)
            else:
                self._handle_udp_out(wire, d, now)

    def _fire_due_synacks(self, now: float) -> None:
        for key, due in list(self._synack_pending.items()):
            if now >= due:
                conn = self._conns.get(key)
                del self._synack_pending[key]
                if conn is not None and conn.state == S_SYN_RECEIVED:
                    self._send_synack(conn, now)

    def _sweep(self, now: float) -> None:
        for conn in list(self._conns.values()):
            if conn.state == S_SYN_RECEIVED and now > conn.connect_deadline:
                self.counters.tcp_refused += 1
                self._send_rst(conn)
                self._reclaim(conn)
        if self._udp_map:
            cutoff = now - self.config.udp_idle_timeout
            for key, entry in list(self._udp_map.items()):
                if entry.last_activity < cutoff:
                    self._evict_udp(key)

    def _evict_udp(self, key: FlowKey) -> None:
        entry = self._udp_map.pop(key, None)
        if entry is None:
            return
        self.counters.udp_evicted += 1
        if self._udp_reverse.get(entry.remote) == key:
            del self._udp_reverse[entry.remote]
        self.flow_table.set_state(key, S_CLOSED)

    # -- shared helpers ----------------------------------------------------

    def _resolve(self, key: FlowKey) -> Optional[ExternalRoute]:
        if self.resolver is not None:
            return self.resolver(key)
        return ExternalRoute(address=(key.dst_ip, key.dst_port))

    def _next_ident(self) -> int:
        self._ip_ident = (self._ip_ident + 1) & 0xFFFF
        return self._ip_ident

    def _app_for(self, key: FlowKey) -> str:
        app = self.flow_table.get_app(key)
        if app is not None:
            return app
        if self.appmap is not None:
            return self.appmap.lookup_app(key)
        return UNKNOWN_APP

    def _submit_log(self, wire: bytes, direction: str, key: FlowKey, now_wall: float) -> None:
        if self.sink is not None:
            self.sink.submit(
                LogEvent(timestamp=now_wall, wire=wire, direction=direction, flow=key)
            )

    def _write_tun(self, d: Datagram, key: FlowKey, payload_len: int) -> bool:
        wire = serialize_datagram(d)
        try:
            self.tun.write(wire)
        except OversizeDatagram:
            self.counters.drops_oversize += 1
            return False
        except PortClosed:
            self._running = False
            return False
        if payload_len:
            self.counters.bytes_down += payload_len
        self.flow_table.touch(key, up=False, nbytes=len(wire), now=time.time())
        self._submit_log(wire, "down", key, time.time())
        return True

    # -- TCP ---------------------------------------------------------------

    def _adv_window(self, conn: TcpProxyConn) -> int:
        room = max(0, min(65535, self.config.pending_cap - conn.pending_net_bytes))
        mss = conn.negotiated_mss
        if room >= mss:
            # receiver-side silly window avoidance: a window that is not a
            # whole number of segments makes the app top it off with a runt
            # every round trip
            room -= room % mss
        return room

    def _app_datagram(self, conn: TcpProxyConn, flags: TcpFlags, payload: bytes = b"",
                      options: bytes = b"", seq: Optional[int] = None) -> Datagram:
        key = conn.key
        return tcp_datagram(
            src_ip=key.dst_ip,
            src_port=key.dst_port,
            dst_ip=key.src_ip,
            dst_port=key.src_port,
            seq=conn.our_seq if seq is None else seq,
            ack=conn.our_ack,
            flags=flags,
            window=self._adv_window(conn),
            payload=payload,
            options=options,
            ident=self._next_ident(),
        )

    def _send_ack(self, conn: TcpProxyConn) -> None:
        conn.acks_owed = 0
        self._ack_pending.discard(conn)
        self._write_tun(self._app_datagram(conn, TcpFlags.ACK), conn.key, 0)

    def _flush_owed_acks(self) -> None:
        pending = self._ack_pending
        while pending:
            conn = pending.pop()
            if conn.acks_owed and conn.state != S_CLOSED:
                self._send_ack(conn)

    def _send_rst(self, conn: TcpProxyConn) -> None:
        self._write_tun(
            self._app_datagram(conn, TcpFlags.RST | TcpFlags.ACK), conn.key, 0
        )

    def _send_synack(self, conn: TcpProxyConn, now: float) -> None:
        d = self._app_datagram(
            conn,
            TcpFlags.SYN | TcpFlags.ACK,
            options=mss_option_bytes(conn.negotiated_mss),
            seq=conn.iss,
        )
        if self._write_tun(d, conn.key, 0):
            conn.synack_time = now
            conn.our_seq = seq_add(conn.iss, 1)

    def _handle_tcp_out(self, wire: bytes, d: Datagram, now: float) -> None:
        key = d.flow_key()
        seg = d.transport
        conn = self._conns.get(key)
        self.flow_table.touch(key, up=True, nbytes=len(wire), now=time.time())
        self._submit_log(wire, "up", key, time.time())
        if conn is None:
            if seg.flags & TcpFlags.SYN and not (seg.flags & TcpFlags.ACK):
                self._tcp_open(key, d, now)
            elif not (seg.flags & TcpFlags.RST):
                # stray segment for a connection we do not know: refuse
                rst = tcp_datagram(
                    src_ip=key.dst_ip, src_port=key.dst_port,
                    dst_ip=key.src_ip, dst_port=key.src_port,
                    seq=seg.ack if seg.flags & TcpFlags.ACK else 0,
                    ack=seq_add(seg.seq, len(d.payload) or 1),
                    flags=TcpFlags.RST | TcpFlags.ACK,
                    ident=self._next_ident(),
                )
                self._write_tun(rst, key, 0)
            return

        conn.app_window = seg.window
        if seg.flags & TcpFlags.RST:
            self._reclaim(conn)
            return

        if conn.state == S_SYN_RECEIVED:
            if seg.flags & TcpFlags.SYN and not (seg.flags & TcpFlags.ACK):
                # SYN retransmit from the app
                if conn.synack_time is not None:
                    self._send_synack(conn, now)
                return
            if (
                seg.flags & TcpFlags.ACK
                and conn.synack_time is not None
                and seg.ack == seq_add(conn.iss, 1)
            ):
                conn.state = S_ESTABLISHED
                conn.snd_una = seg.ack
                self.flow_table.set_state(key, S_ESTABLISHED)
                self._register_read(conn)
            else:
                return

        if seg.flags & TcpFlags.ACK:
            self._process_app_ack(conn, seg.ack)
            if conn.state == S_CLOSED:
                return

        if d.payload:
            if seg.seq == conn.our_ack and conn.state in (S_ESTABLISHED, S_FIN_WAIT):
                self._accept_app_data(conn, d, now)
            else:
                # out-of-order, duplicate, or data after the app's FIN
                self._send_ack(conn)

        if seg.flags & TcpFlags.FIN:
            fin_seq = seq_add(seg.seq, len(d.payload))
            if fin_seq == conn.our_ack and not conn.app_fin:
                conn.our_ack = seq_add(conn.our_ack, 1)
                conn.app_fin = True
                self._send_ack(conn)
                if conn.state == S_ESTABLISHED:
                    conn.state = S_CLOSE_WAIT
                    self.flow_table.set_state(key, S_CLOSE_WAIT)
                elif conn.state == S_FIN_WAIT:
                    if conn.fin_acked:
                        self._reclaim(conn)
                    else:
                        conn.state = S_LAST_ACK
                        self.flow_table.set_state(key, S_LAST_ACK)
                self._maybe_shutdown_external(conn)
            elif fin_seq != conn.our_ack:
                self._send_ack(conn)

    def _tcp_open(self, key: FlowKey, d: Datagram, now: float) -> None:
        if self._fd_in_use >= self.config.fd_limit:
            self.counters.tcp_refused += 1
            self._refuse(key, d)
            return
        route = self._resolve(key)
        if route is None:
            self.counters.tcp_refused += 1
            self._refuse(key, d)
            return
        try:
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        except OSError:
            self.counters.tcp_refused += 1
            self._refuse(key, d)
            return
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._iss_counter = (self._iss_counter + 0x01000193) & 0xFFFFFFFF
        conn = TcpProxyConn(key, sock, self._iss_counter, now)
        conn.our_ack = seq_add(d.transport.seq, 1)
        conn.app_window = d.transport.window
        conn.negotiated_mss = self._mss
        conn.route = route
        conn.connect_deadline = now + self.config.half_open_timeout
        err = sock.connect_ex(route.address)
        if err not in _CONNECT_IN_PROGRESS:
            sock.close()
            self.counters.tcp_refused += 1
            self._refuse(key, d)
            return
        self._conns[key] = conn
        self._count_fd(1)
        self.counters.flows_total += 1
        self._selector.register(sock, selectors.EVENT_WRITE, ("conn", conn))
        self.flow_table.set_state(key, S_SYN_RECEIVED)

    def _refuse(self, key: FlowKey, d: Datagram) -> None:
        rst = tcp_datagram(
            src_ip=key.dst_ip, src_port=key.dst_port,
            dst_ip=key.src_ip, dst_port=key.src_port,
            seq=0, ack=seq_add(d.transport.seq, 1),
            flags=TcpFlags.RST | TcpFlags.ACK,
            ident=self._next_ident(),
        )
        self._write_tun(rst, key, 0)
        self.flow_table.set_state(key, S_CLOSED)

    def _conn_writable(self, conn: TcpProxyConn, now: float) -> None:
        if conn.state == S_SYN_RECEIVED and conn.synack_time is None:
            err = conn.sock.getsockopt(socket.SOL_SOCKET, socket.SO_ERROR)
            if err != 0:
                self.counters.tcp_refused += 1
                self._send_rst(conn)
                self._reclaim(conn)
                return
            self._set_write_interest(conn, False)
            latency = conn.route.latency_s if conn.route else 0.0
            due = conn.syn_time + latency
            if latency > 0 and now < due:
                self._synack_pending[conn.key] = due
            else:
                self._send_synack(conn, now)
            return
        self._flush_to_net(conn)

    def _apply_interest(self, conn: TcpProxyConn) -> None:
        """Reconcile selector registration with the conn's interest flags."""
        if conn.sock is None:
            return
        events = 0
        if conn.want_write:
            events |= selectors.EVENT_WRITE
        if conn.read_registered and not conn.read_paused:
            events |= selectors.EVENT_READ
        try:
            if events:
                try:
                    self._selector.modify(conn.sock, events, ("conn", conn))
                except KeyError:
                    self._selector.register(conn.sock, events, ("conn", conn))
            else:
                try:
                    self._selector.unregister(conn.sock)
                except KeyError:
                    pass
        except (ValueError, OSError):
            pass

    def _set_write_interest(self, conn: TcpProxyConn, want: bool) -> None:
        if conn.want_write == want:
            return
        conn.want_write = want
        self._apply_interest(conn)

    def _register_read(self, conn: TcpProxyConn) -> None:
        if conn.read_registered:
            return
        conn.read_registered = True
        conn.read_paused = False
        self._apply_interest(conn)

    def _set_read_paused(self, conn: TcpProxyConn, paused: bool) -> None:
        if not conn.read_registered or conn.read_paused == paused:
            return
        conn.read_paused = paused
        self._apply_interest(conn)

    def _accept_app_data(self, conn: TcpProxyConn, d: Datagram, now: float) -> None:
        payload = d.payload
        if conn.pending_net_bytes + len(payload) > self.config.pending_cap:
            # no room: stay silent, the app's transport will retransmit
            self.counters.drops_overflow += 1
            return
        data = payload
        if self.dpi is not None:
            result = self.dpi.inspect_datagram(d, app_id=self._app_for(conn.key))
            if result is not None:
                if result.verdict == "drop":
                    # swallow the bytes but keep the app leg alive
                    self.counters.dpi_blocked += 1
                    conn.our_ack = seq_add(conn.our_ack, len(payload))
                    self._send_ack(conn)
                    return
                data = result.datagram.payload
        conn.our_ack = seq_add(conn.our_ack, len(payload))
        conn.pending_to_net.append(data)
        conn.pending_net_bytes += len(data)
        self.counters.bytes_up += len(payload)
        if len(payload) == conn.negotiated_mss:
            # delayed ack: every second full-size segment.  Sub-mss segments
            # (request tails, interactive traffic) are acked at once, and the
            # worker loop flushes a held ack as soon as the inbound queue
            # goes quiet, so a sender can never stall on it.
            conn.acks_owed += 1
            if conn.acks_owed >= 2:
                self._send_ack(conn)
            else:
                self._ack_pending.add(conn)
        else:
            self._send_ack(conn)
        self._flush_to_net(conn)

    def _flush_to_net(self, conn: TcpProxyConn) -> None:
        while conn.pending_to_net:
            chunk = conn.pending_to_net[0]
            try:
                n = conn.sock.send(chunk)
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                self._external_error(conn)
                return
            conn.pending_net_bytes -= n
            if n == len(chunk):
                conn.pending_to_net.popleft()
            else:
                conn.pending_to_net[0] = chunk[n:]
                break
        self._set_write_interest(conn, bool(conn.pending_to_net))
        if not conn.pending_to_net:
            self._maybe_shutdown_external(conn)

    def _maybe_shutdown_external(self, conn: TcpProxyConn) -> None:
        if (
            conn.app_fin
            and not conn.pending_to_net
            and not conn.shutdown_wr_done
            and conn.state != S_CLOSED
        ):
            conn.shutdown_wr_done = True
            try:
                conn.sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass

    def _conn_readable(self, conn: TcpProxyConn, now: float) -> None:
        for _ in range(4):
            try:
                data = conn.sock.recv(self._read_size)
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                self._external_error(conn)
                return
            if not data:
                conn.server_eof = True
                self._set_read_paused(conn, True)
                self._flush_to_app(conn)
                return
            conn.pending_to_app.append(data)
            conn.pending_app_bytes += len(data)
            self._flush_to_app(conn)
            if conn.state == S_CLOSED:
                return
            if conn.pending_app_bytes >= self.config.pending_cap:
                self._set_read_paused(conn, True)
                break

    def _flush_to_app(self, conn: TcpProxyConn) -> None:
        mss = conn.negotiated_mss
        while conn.pending_to_app:
            in_flight = seq_sub(conn.our_seq, conn.snd_una)
            budget = conn.app_window - in_flight
            if budget <= 0:
                break
            chunk = conn.pending_to_app[0]
            seg_len = min(len(chunk), budget, mss)
            payload = chunk[:seg_len]
            last = seg_len == len(chunk) and len(conn.pending_to_app) == 1
            flags = TcpFlags.ACK | (TcpFlags.PSH if last else TcpFlags(0))
            d = self._app_datagram(conn, flags, payload=payload)
            if not self._write_tun(d, conn.key, seg_len):
                return
            conn.our_seq = seq_add(conn.our_seq, seg_len)
            conn.pending_app_bytes -= seg_len
            if seg_len == len(chunk):
                conn.pending_to_app.popleft()
            else:
                conn.pending_to_app[0] = chunk[seg_len:]
        if (
            conn.read_paused
            and not conn.server_eof
            and conn.pending_app_bytes < self.config.pending_cap // 2
        ):
            self._set_read_paused(conn, False)
        if (
            conn.server_eof
            and not conn.pending_to_app
            and not conn.fin_sent
            and conn.state in (S_ESTABLISHED, S_CLOSE_WAIT)
        ):
            self._send_fin(conn)

    def _send_fin(self, conn: TcpProxyConn) -> None:
        d = self._app_datagram(conn, TcpFlags.FIN | TcpFlags.ACK)
        if not self._write_tun(d, conn.key, 0):
            return
        conn.fin_sent = True
        conn.fin_seq = conn.our_seq
        conn.our_seq = seq_add(conn.our_seq, 1)
        if conn.state == S_CLOSE_WAIT:
            conn.state = S_LAST_ACK
        else:
            conn.state = S_FIN_WAIT
        self.flow_table.set_state(conn.key, conn.state)

    def _process_app_ack(self, conn: TcpProxyConn, ack: int) -> None:
        if seq_lt(conn.snd_una, ack) and seq_leq(ack, conn.our_seq):
            conn.snd_una = ack
            if conn.fin_sent and not conn.fin_acked and ack == seq_add(conn.fin_seq, 1):
                conn.fin_acked = True
                if conn.state == S_LAST_ACK:
                    self._reclaim(conn)
                    return
                if conn.state == S_FIN_WAIT and conn.app_fin:
                    self._reclaim(conn)
                    return
        # flush even on a duplicate ack: it may be a pure window update
        self._flush_to_app(conn)

    def _external_error(self, conn: TcpProxyConn) -> None:
        if conn.state in (S_ESTABLISHED, S_SYN_RECEIVED, S_FIN_WAIT, S_CLOSE_WAIT,
                          S_LAST_ACK):
            self._send_rst(conn)
        self._reclaim(conn)

    def _reclaim(self, conn: TcpProxyConn) -> None:
        if conn.sock is not None:
            self._unregister_quiet(conn.sock)
            try:
                conn.sock.close()
            except OSError:
                pass
            conn.sock = None
            self._count_fd(-1)
        conn.state = S_CLOSED
        self._synack_pending.pop(conn.key, None)
        if self._conns.get(conn.key) is conn:
            del self._conns[conn.key]
        self.flow_table.set_state(conn.key, S_CLOSED)

    # -- UDP ---------------------------------------------------------------

    def _ensure_udp_sock(self) -> Optional[socket.socket]:
        if self._udp_sock is None:
            if self._fd_in_use >= self.config.fd_limit:
                return None
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.setblocking(False)
            self._udp_sock = sock
            self._count_fd(1)
            self._selector.register(sock, selectors.EVENT_READ, ("udp",))
        return self._udp_sock

    def _handle_udp_out(self, wire: bytes, d: Datagram, now: float) -> None:
        key = d.flow_key()
        self.flow_table.touch(key, up=True, nbytes=len(wire), now=time.time(),
                              state="ACTIVE")
        self._submit_log(wire, "up", key, time.time())
        payload = d.payload
        if self.dpi is not None and payload:
            result = self.dpi.inspect_datagram(d, app_id=self._app_for(key))
            if result is not None:
                if result.verdict == "drop":
                    self.counters.dpi_blocked += 1
                    return
                payload = result.datagram.payload
        route = self._resolve(key)
        if route is None:
            self.counters.drops_nomapping += 1
            return
        sock = self._ensure_udp_sock()
        if sock is None:
            self.counters.send_failures += 1
            return
        entry = self._udp_map.get(key)
        if entry is None:
            if len(self._udp_map) >= self.config.udp_map_cap:
                oldest = min(self._udp_map, key=lambda k: self._udp_map[k].last_activity)
                self._evict_udp(oldest)
            entry = UdpMapEntry(key=key, last_activity=now, remote=route.address)
            self._udp_map[key] = entry
            self.counters.flows_total += 1
        entry.last_activity = now
        entry.remote = route.address
        self._udp_reverse[route.address] = key
        try:
            sock.sendto(payload, route.address)
        except OSError:
            self.counters.send_failures += 1
            return
        self.counters.bytes_up += len(payload)

    def _udp_readable(self, now: float) -> None:
        sock = self._udp_sock
        if sock is None:
            return
        for _ in range(16):
            try:
                data, remote = sock.recvfrom(65535)
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                return
            key = self._udp_reverse.get(remote)
            if key is None or key not in self._udp_map:
                self.counters.drops_nomapping += 1
                continue
            self._udp_map[key].last_activity = now
            if len(data) + 28 > self.config.mtu:
                self.counters.drops_oversize += 1
                continue
            reply = udp_datagram(
                src_ip=key.dst_ip,
                src_port=key.dst_port,
                dst_ip=key.src_ip,
                dst_port=key.src_port,
                payload=data,
                ident=self._next_ident(),
            )
            self._write_tun(reply, key, len(data))


def run_forwarder(tun: TunPort, config: Optional[ForwarderConfig] = None, **kwargs) -> Engine:
    """Start an engine against ``tun``; returns the running handle."""
    return Engine(tun, config, **kwargs).start()

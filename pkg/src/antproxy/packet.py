"""IPv4/TCP/UDP packet parsing and construction.

Raw IP datagrams arriving from the TUN side are parsed into typed
headers, validated (lengths, checksums), and re-emitted bit-exact on
serialization.  Everything here is a pure function over byte strings:
no sockets, no shared state, safe from any thread.

Scope is deliberately narrow: IPv4 only, TCP and UDP transports, no
fragments (the TUN link MTU is locally controlled, so fragments never
legitimately appear), no IP option interpretation.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field
from enum import IntFlag

import numpy as np

PROTO_TCP = 6
PROTO_UDP = 17
PROTO_ICMP = 1

IP_HEADER_LEN = 20
TCP_HEADER_LEN = 20
UDP_HEADER_LEN = 8

# TCP option kinds we care about; everything else is carried opaquely.
TCPOPT_END = 0
TCPOPT_NOP = 1
TCPOPT_MSS = 2

SEQ_MOD = 1 << 32


class PacketError(ValueError):
    """Base class for codec failures."""


class MalformedHeader(PacketError):
    """Truncated or structurally invalid header."""


class FragmentUnsupported(MalformedHeader):
    """IP fragment (MF set or nonzero offset); reassembly is out of scope."""


class BadChecksum(PacketError):
    """Stored IP or transport checksum does not verify."""


class UnsupportedVersion(PacketError):
    """Not an IPv4 datagram."""


class UnsupportedProtocol(PacketError):
    """IPv4 protocol other than TCP/UDP; carries the raw protocol number."""

    def __init__(self, protocol: int):
        super().__init__(f"unsupported IP protocol {protocol}")
        self.protocol = protocol


class FieldOverflow(PacketError):
    """A field value does not fit its wire encoding."""


class MtuTooSmall(PacketError):
    """MTU below the minimum needed for IP + TCP headers."""


class TcpFlags(IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20


@dataclass(frozen=True)
class FlowKey:
    """5-tuple flow identity, canonical direction app -> internet."""

    protocol: int
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int

    def __str__(self) -> str:
        name = {PROTO_TCP: "tcp", PROTO_UDP: "udp"}.get(self.protocol, str(self.protocol))
        return f"{name}:{self.src_ip}:{self.src_port}->{self.dst_ip}:{self.dst_port}"


def internet_checksum(data) -> int:
    """Ones-complement 16-bit checksum (RFC 1071 semantics).

    A block that already contains its own correct checksum sums to 0.
    Vectorized with numpy; the test suite checks it against a naive
    byte-at-a-time adder.
    """
    buf = memoryview(data)
    n = len(buf)
    if n == 0:
        return 0xFFFF
    if n & 1:
        even = np.frombuffer(buf[: n - 1], dtype=">u2")
        s = int(even.sum(dtype=np.uint64)) + (buf[n - 1] << 8)
    else:
        s = int(np.frombuffer(buf, dtype=">u2").sum(dtype=np.uint64))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def mss_for_mtu(mtu: int) -> int:
    """MSS to advertise for a link MTU: MTU minus 20 B IP + 20 B TCP."""
    if mtu < 60:
        raise MtuTooSmall(f"mtu {mtu} < 60")
    return mtu - IP_HEADER_LEN - TCP_HEADER_LEN


# --- mod-2^32 sequence arithmetic -------------------------------------------

def seq_add(a: int, n: int) -> int:
    return (a + n) % SEQ_MOD

def seq_sub(a: int, b: int) -> int:
    return (a - b) % SEQ_MOD

def seq_lt(a: int, b: int) -> bool:
    """True if a precedes b in the 2^31 sequence window."""
    return 0 < ((b - a) % SEQ_MOD) < 0x80000000

def seq_leq(a: int, b: int) -> bool:
    return a == b or seq_lt(a, b)


@dataclass
class Ipv4Header:
    src_ip: str
    dst_ip: str
    protocol: int
    total_length: int = 0
    ttl: int = 64
    ident: int = 0
    tos: int = 0
    df: bool = True
    mf: bool = False
    frag_offset: int = 0
    ihl: int = 5
    options: bytes = b""
    # Recomputed on serialize; excluded from equality so round-trip
    # comparisons are over semantic fields only.
    header_checksum: int = field(default=0, compare=False)

    version: int = 4


@dataclass
class TcpHeader:
    src_port: int
    dst_port: int
    seq: int = 0
    ack: int = 0
    flags: TcpFlags = TcpFlags(0)
    window: int = 65535
    urgent: int = 0
    options: bytes = b""
    checksum: int = field(default=0, compare=False)

    @property
    def data_offset(self) -> int:
        return 5 + len(self.options) // 4

    def mss_option(self) -> int | None:
        """Decode the MSS option if present; other options are opaque."""
        opts = self.options
        i = 0
        while i < len(opts):
            kind = opts[i]
            if kind == TCPOPT_END:
                break
            if kind == TCPOPT_NOP:
                i += 1
                continue
            if i + 1 >= len(opts):
                break
            length = opts[i + 1]
            if length < 2 or i + length > len(opts):
                break
            if kind == TCPOPT_MSS and length == 4:
                return struct.unpack_from("!H", opts, i + 2)[0]
            i += length
        return None


def mss_option_bytes(mss: int) -> bytes:
    """Encode a standalone MSS option (kind 2, length 4)."""
    if not 0 <= mss <= 0xFFFF:
        raise FieldOverflow(f"mss {mss} out of range")
    return struct.pack("!BBH", TCPOPT_MSS, 4, mss)


@dataclass
class UdpHeader:
    src_port: int
    dst_port: int
    length: int = UDP_HEADER_LEN
    checksum: int = field(default=0, compare=False)


@dataclass
class Datagram:
    """A whole IPv4 datagram: IP header, one transport header, payload."""

    ip: Ipv4Header
    transport: TcpHeader | UdpHeader
    payload: bytes = b""

    @property
    def is_tcp(self) -> bool:
        return isinstance(self.transport, TcpHeader)

    def flow_key(self) -> FlowKey:
        return FlowKey(
            self.ip.protocol,
            self.ip.src_ip,
            self.transport.src_port,
            self.ip.dst_ip,
            self.transport.dst_port,
        )


def _pseudo_header(src_ip: str, dst_ip: str, protocol: int, length: int) -> bytes:
    return (
        socket.inet_aton(src_ip)
        + socket.inet_aton(dst_ip)
        + struct.pack("!BBH", 0, protocol, length)
    )


def parse_datagram(data) -> Datagram:
    """Parse and validate one whole IPv4 datagram.

    Raises MalformedHeader / FragmentUnsupported for structural problems,
    UnsupportedVersion for non-IPv4, UnsupportedProtocol for transports
    other than TCP/UDP (the caller decides drop policy), and BadChecksum
    when any stored checksum fails verification.
    """
    buf = bytes(data)
    if len(buf) < IP_HEADER_LEN:
        raise MalformedHeader(f"datagram of {len(buf)} bytes, need >= 20")
    ver_ihl = buf[0]
    version = ver_ihl >> 4
    if version != 4:
        raise UnsupportedVersion(f"IP version {version}")
    ihl = ver_ihl & 0x0F
    if ihl < 5:
        raise MalformedHeader(f"ihl {ihl} < 5")
    hlen = ihl * 4
    if len(buf) < hlen:
        raise MalformedHeader("truncated IP header")
    tos, total_length, ident, flags_frag, ttl, protocol, stored_ck = struct.unpack_from(
        "!xBHHHBBH", buf, 0
    )
    if total_length < hlen or total_length != len(buf):
        raise MalformedHeader(
            f"total_length {total_length} inconsistent with {len(buf)} received bytes"
        )
    mf = bool(flags_frag & 0x2000)
    frag_offset = flags_frag & 0x1FFF
    if mf or frag_offset:
        raise FragmentUnsupported("IP fragment")
    if internet_checksum(buf[:hlen]) != 0:
        raise BadChecksum("IP header checksum")
    ip = Ipv4Header(
        src_ip=socket.inet_ntoa(buf[12:16]),
        dst_ip=socket.inet_ntoa(buf[16:20]),
        protocol=protocol,
        total_length=total_length,
        ttl=ttl,
        ident=ident,
        tos=tos,
        df=bool(flags_frag & 0x4000),
        mf=mf,
        frag_offset=frag_offset,
        ihl=ihl,
        options=buf[IP_HEADER_LEN:hlen],
        header_checksum=stored_ck,
    )

    seg = buf[hlen:]
    if protocol == PROTO_TCP:
        if len(seg) < TCP_HEADER_LEN:
            raise MalformedHeader("truncated TCP header")
        sport, dport, seq, ack, off_flags, window, ck, urg = struct.unpack_from(
            "!HHIIHHHH", seg, 0
        )
        data_offset = off_flags >> 12
        if data_offset < 5:
            raise MalformedHeader(f"TCP data_offset {data_offset} < 5")
        if len(seg) < data_offset * 4:
            raise MalformedHeader("TCP options truncated")
        if internet_checksum(_pseudo_header(ip.src_ip, ip.dst_ip, PROTO_TCP, len(seg)) + seg) != 0:
            raise BadChecksum("TCP checksum")
        tcp = TcpHeader(
            src_port=sport,
            dst_port=dport,
            seq=seq,
            ack=ack,
            flags=TcpFlags(off_flags & 0x3F),
            window=window,
            urgent=urg,
            options=seg[TCP_HEADER_LEN : data_offset * 4],
            checksum=ck,
        )
        return Datagram(ip=ip, transport=tcp, payload=seg[data_offset * 4 :])

    if protocol == PROTO_UDP:
        if len(seg) < UDP_HEADER_LEN:
            raise MalformedHeader("truncated UDP header")
        sport, dport, length, ck = struct.unpack_from("!HHHH", seg, 0)
        if length < UDP_HEADER_LEN or length != len(seg):
            raise MalformedHeader(f"UDP length {length} inconsistent")
        # checksum 0 means "absent" in UDP over IPv4
        if ck != 0 and internet_checksum(
            _pseudo_header(ip.src_ip, ip.dst_ip, PROTO_UDP, len(seg)) + seg
        ) != 0:
            raise BadChecksum("UDP checksum")
        udp = UdpHeader(src_port=sport, dst_port=dport, length=length, checksum=ck)
        return Datagram(ip=ip, transport=udp, payload=seg[UDP_HEADER_LEN:])

    raise UnsupportedProtocol(protocol)


def serialize_datagram(d: Datagram) -> bytes:
    """Emit wire bytes with fresh IP and transport checksums.

    total_length and the UDP length field are recomputed from the actual
    payload, and the stored checksum fields on ``d`` are updated to the
    emitted values.
    """
    ip = d.ip
    if len(ip.options) % 4:
        raise FieldOverflow("IP options must pad to 32-bit words")
    hlen = IP_HEADER_LEN + len(ip.options)
    ihl = hlen // 4
    if ihl > 15:
        raise FieldOverflow("IP header too long")

    if d.is_tcp:
        t = d.transport
        if len(t.options) % 4:
            raise FieldOverflow("TCP options must pad to 32-bit words")
        toff = 5 + len(t.options) // 4
        if toff > 15:
            raise FieldOverflow("TCP options too long")
        seg_len = toff * 4 + len(d.payload)
        transport_proto = PROTO_TCP
    else:
        t = d.transport
        seg_len = UDP_HEADER_LEN + len(d.payload)
        transport_proto = PROTO_UDP

    total = hlen + seg_len
    if total > 0xFFFF:
        raise FieldOverflow(f"datagram of {total} bytes exceeds 16-bit total_length")
    for port in (t.src_port, t.dst_port):
        if not 0 <= port <= 0xFFFF:
            raise FieldOverflow(f"port {port} out of range")

    ip.total_length = total
    ip.ihl = ihl
    flags_frag = (0x4000 if ip.df else 0) | (0x2000 if ip.mf else 0) | (ip.frag_offset & 0x1FFF)
    head = bytearray(
        struct.pack(
            "!BBHHHBBH4s4s",
            (4 << 4) | ihl,
            ip.tos,
            total,
            ip.ident,
            flags_frag,
            ip.ttl,
            ip.protocol,
            0,
            socket.inet_aton(ip.src_ip),
            socket.inet_aton(ip.dst_ip),
        )
    ) + bytearray(ip.options)
    ip_ck = internet_checksum(head)
    struct.pack_into("!H", head, 10, ip_ck)
    ip.header_checksum = ip_ck

    pseudo = _pseudo_header(ip.src_ip, ip.dst_ip, transport_proto, seg_len)
    if d.is_tcp:
        if not (0 <= t.seq < SEQ_MOD and 0 <= t.ack < SEQ_MOD):
            raise FieldOverflow("seq/ack out of 32-bit range")
        seg = bytearray(
            struct.pack(
                "!HHIIHHHH",
                t.src_port,
                t.dst_port,
                t.seq,
                t.ack,
                (toff << 12) | int(t.flags),
                t.window,
                0,
                t.urgent,
            )
        ) + bytearray(t.options) + bytearray(d.payload)
        ck = internet_checksum(pseudo + seg)
        struct.pack_into("!H", seg, 16, ck)
    else:
        t.length = seg_len
        seg = bytearray(
            struct.pack("!HHHH", t.src_port, t.dst_port, seg_len, 0)
        ) + bytearray(d.payload)
        ck = internet_checksum(pseudo + seg)
        if ck == 0:
            ck = 0xFFFF  # 0 on the wire means "no checksum"
        struct.pack_into("!H", seg, 6, ck)
    t.checksum = ck
    return bytes(head + seg)


def tcp_datagram(
    src_ip: str,
    src_port: int,
    dst_ip: str,
    dst_port: int,
    seq: int,
    ack: int,
    flags: TcpFlags,
    window: int = 65535,
    payload: bytes = b"",
    options: bytes = b"",
    ttl: int = 64,
    ident: int = 0,
) -> Datagram:
    ip = Ipv4Header(
        src_ip=src_ip,
        dst_ip=dst_ip,
        protocol=PROTO_TCP,
        ttl=ttl,
        ident=ident,
        total_length=IP_HEADER_LEN + TCP_HEADER_LEN + len(options) + len(payload),
    )
    tcp = TcpHeader(
        src_port=src_port,
        dst_port=dst_port,
        seq=seq,
        ack=ack,
        flags=flags,
        window=window,
        options=options,
    )
    return Datagram(ip=ip, transport=tcp, payload=payload)


def udp_datagram(
    src_ip: str,
    src_port: int,
    dst_ip: str,
    dst_port: int,
    payload: bytes = b"",
    ttl: int = 64,
    ident: int = 0,
) -> Datagram:
    ip = Ipv4Header(
        src_ip=src_ip,
        dst_ip=dst_ip,
        protocol=PROTO_UDP,
        ttl=ttl,
        ident=ident,
        total_length=IP_HEADER_LEN + UDP_HEADER_LEN + len(payload),
    )
    udp = UdpHeader(src_port=src_port, dst_port=dst_port, length=UDP_HEADER_LEN + len(payload))
    return Datagram(ip=ip, transport=udp, payload=payload)

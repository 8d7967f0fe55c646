"""Passive performance measurement and flow feature extraction.

Throughput is computed from forwarding logs alone: no probe traffic is ever
generated, so measurement overhead on the wire is zero by construction.  The
windowed maximum mirrors how active speed tests report their number, except
the samples come from traffic the device was already sending.

Feature vectors summarise a flow with 66 values (31 per direction plus 4
flow-level) suitable for CSV export and offline classification.
"""

from __future__ import annotations

import csv
import io
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .packet import Datagram, FlowKey, TcpFlags, TcpHeader


class TelemetryError(Exception):
    pass


class NotConnected(TelemetryError):
    """Connection has not completed its external connect yet."""


class EmptyFlow(TelemetryError):
    """Feature extraction needs at least one packet."""


class Direction(str, Enum):
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class TraceSample:
    """One forwarded datagram as seen by the throughput accountant."""

    timestamp: float
    direction: Direction
    nbytes: int
    flow: Optional[FlowKey] = None
    app_id: Optional[str] = None


def max_windowed_throughput(
    trace: Sequence[TraceSample], window_s: float, direction: Direction
) -> float:
    """Maximum average throughput in Mbps over any window of ``window_s``.

    Windows are anchored at packet timestamps: for each sample at time t the
    bytes in [t, t + W) are summed and the best window wins.  Timestamps must
    be nondecreasing.  Empty trace (or no samples in the direction) -> 0.
    """
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    ts = [s.timestamp for s in trace if s.direction == direction]
    sizes = [s.nbytes for s in trace if s.direction == direction]
    if not ts:
        return 0.0
    t = np.asarray(ts, dtype=np.float64)
    prefix = np.concatenate(([0.0], np.cumsum(np.asarray(sizes, dtype=np.float64))))
    # right edge of each anchored window, half-open
    ends = np.searchsorted(t, t + window_s, side="left")
    best = float(np.max(prefix[ends] - prefix[np.arange(len(t))]))
    return best * 8.0 / window_s / 1e6


def connect_latency(conn) -> float:
    """Milliseconds from app SYN arrival to SYN-ACK emission.

    ``conn`` is any object exposing ``syn_time`` and ``synack_time`` floats
    (None until the handshake step happened).
    """
    syn = getattr(conn, "syn_time", None)
    synack = getattr(conn, "synack_time", None)
    if syn is None or synack is None:
        raise NotConnected("connection never completed its handshake")
    return (synack - syn) * 1000.0


# ---------------------------------------------------------------------------
# feature extraction


@dataclass(frozen=True)
class PacketRecord:
    """Header-only record of one packet, enough for feature extraction."""

    timestamp: float
    direction: Direction
    pkt_size: int
    payload_size: int
    ttl: int
    tcp_flags: int = 0
    tcp_window: int = 0


def record_from_datagram(d: Datagram, direction: Direction, timestamp: float) -> PacketRecord:
    flags = 0
    window = 0
    if isinstance(d.transport, TcpHeader):
        flags = int(d.transport.flags)
        window = d.transport.window
    return PacketRecord(
        timestamp=timestamp,
        direction=direction,
        pkt_size=d.ip.total_length,
        payload_size=len(d.payload),
        ttl=d.ip.ttl,
        tcp_flags=flags,
        tcp_window=window,
    )


BURST_GAP_S = 0.001

_DIR_FIELDS = (
    "pkt_count",
    "byte_count",
    "payload_byte_count",
    "pkt_size_min",
    "pkt_size_max",
    "pkt_size_mean",
    "pkt_size_std",
    "payload_size_min",
    "payload_size_max",
    "payload_size_mean",
    "payload_size_std",
    "interarrival_min",
    "interarrival_max",
    "interarrival_mean",
    "interarrival_std",
    "flag_syn",
    "flag_ack",
    "flag_fin",
    "flag_rst",
    "flag_psh",
    "flag_urg",
    "ttl_min",
    "ttl_max",
    "ttl_mean",
    "tcp_window_min",
    "tcp_window_max",
    "tcp_window_mean",
    "burst_count",
    "burst_mean_size",
    "burst_max_size",
    "pkts_per_second",
)

FEATURE_NAMES: tuple[str, ...] = tuple(
    [f"up_{name}" for name in _DIR_FIELDS]
    + [f"down_{name}" for name in _DIR_FIELDS]
    + ["duration_s", "total_pkts", "total_bytes", "up_down_byte_ratio"]
)

assert len(FEATURE_NAMES) == 66


def _stats4(values: Sequence[float]) -> tuple[float, float, float, float]:
    # min, max, mean, population std; empty -> zeros
    if not values:
        return 0.0, 0.0, 0.0, 0.0
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n
    return float(min(values)), float(max(values)), mean, math.sqrt(var)


def _direction_features(
    pkts: Sequence[PacketRecord], duration_s: float, burst_gap_s: float
) -> dict[str, float]:
    out: dict[str, float] = {}
    out["pkt_count"] = float(len(pkts))
    out["byte_count"] = float(sum(p.pkt_size for p in pkts))
    out["payload_byte_count"] = float(sum(p.payload_size for p in pkts))

    sizes = [float(p.pkt_size) for p in pkts]
    mn, mx, mean, std = _stats4(sizes)
    out["pkt_size_min"], out["pkt_size_max"] = mn, mx
    out["pkt_size_mean"], out["pkt_size_std"] = mean, std

    payloads = [float(p.payload_size) for p in pkts]
    mn, mx, mean, std = _stats4(payloads)
    out["payload_size_min"], out["payload_size_max"] = mn, mx
    out["payload_size_mean"], out["payload_size_std"] = mean, std

    gaps = [b.timestamp - a.timestamp for a, b in zip(pkts, pkts[1:])]
    mn, mx, mean, std = _stats4(gaps)
    out["interarrival_min"], out["interarrival_max"] = mn, mx
    out["interarrival_mean"], out["interarrival_std"] = mean, std

    for name, bit in (
        ("flag_syn", TcpFlags.SYN),
        ("flag_ack", TcpFlags.ACK),
        ("flag_fin", TcpFlags.FIN),
        ("flag_rst", TcpFlags.RST),
        ("flag_psh", TcpFlags.PSH),
        ("flag_urg", TcpFlags.URG),
    ):
        out[name] = float(sum(1 for p in pkts if p.tcp_flags & bit))

    ttls = [float(p.ttl) for p in pkts]
    mn, mx, mean, _ = _stats4(ttls)
    out["ttl_min"], out["ttl_max"], out["ttl_mean"] = mn, mx, mean

    windows = [float(p.tcp_window) for p in pkts]
    mn, mx, mean, _ = _stats4(windows)
    out["tcp_window_min"], out["tcp_window_max"], out["tcp_window_mean"] = mn, mx, mean

    # bursts: maximal runs of this direction's packets with gaps < burst_gap_s
    burst_sizes: list[int] = []
    for i, p in enumerate(pkts):
        if i == 0 or p.timestamp - pkts[i - 1].timestamp >= burst_gap_s:
            burst_sizes.append(1)
        else:
            burst_sizes[-1] += 1
    out["burst_count"] = float(len(burst_sizes))
    out["burst_mean_size"] = (sum(burst_sizes) / len(burst_sizes)) if burst_sizes else 0.0
    out["burst_max_size"] = float(max(burst_sizes)) if burst_sizes else 0.0

    out["pkts_per_second"] = len(pkts) / duration_s if duration_s > 0 else 0.0
    return out


def extract_features(
    packets: Sequence[PacketRecord], burst_gap_s: float = BURST_GAP_S
) -> dict[str, float]:
    """66-feature vector for one flow, keyed by FEATURE_NAMES in order.

    ``packets`` must be time-ordered and non-empty.  A direction with a single
    packet gets std 0 and inter-arrival stats 0; an absent direction is all
    zeros.  Degenerate denominators (zero duration, zero downstream bytes)
    yield 0 rather than raising.
    """
    if not packets:
        raise EmptyFlow("no packets")
    up = [p for p in packets if p.direction == Direction.UP]
    down = [p for p in packets if p.direction == Direction.DOWN]

    duration = packets[-1].timestamp - packets[0].timestamp
    vec: dict[str, float] = {}
    for name, value in _direction_features(up, duration, burst_gap_s).items():
        vec[f"up_{name}"] = value
    for name, value in _direction_features(down, duration, burst_gap_s).items():
        vec[f"down_{name}"] = value

    up_bytes = vec["up_byte_count"]
    down_bytes = vec["down_byte_count"]
    vec["duration_s"] = duration
    vec["total_pkts"] = float(len(packets))
    vec["total_bytes"] = up_bytes + down_bytes
    vec["up_down_byte_ratio"] = up_bytes / down_bytes if down_bytes > 0 else 0.0
    return vec


# ---------------------------------------------------------------------------
# CSV export

LABEL_COLUMN = "app_id"


def export_features(
    vectors: Iterable[Mapping[str, float]],
    labels: Optional[Sequence[Optional[str]]] = None,
) -> str:
    """CSV text: FEATURE_NAMES header plus an app_id label column.

    Values are written as decimals with 9 significant digits.  A missing or
    None label becomes "unknown".
    """
    rows = list(vectors)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(FEATURE_NAMES) + [LABEL_COLUMN])
    for i, vec in enumerate(rows):
        label = labels[i] if labels is not None and i < len(labels) else None
        if label is None:
            label = "unknown"
        writer.writerow([format(float(vec[name]), ".9g") for name in FEATURE_NAMES] + [label])
    return buf.getvalue()


def parse_features_csv(text: str) -> tuple[list[dict[str, float]], list[str]]:
    """Inverse of export_features; returns (vectors, labels)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != list(FEATURE_NAMES) + [LABEL_COLUMN]:
        raise TelemetryError("unexpected CSV header")
    vectors: list[dict[str, float]] = []
    labels: list[str] = []
    for row in reader:
        if not row:
            continue
        vectors.append({name: float(cell) for name, cell in zip(FEATURE_NAMES, row)})
        labels.append(row[-1])
    return vectors, labels


# ---------------------------------------------------------------------------
# live stats

DEFAULT_WINDOWS = (1.0, 5.0)


@dataclass
class PerfSample:
    window: float
    value: float
    scope: str = "device"
    network: str = "SIM"


class TelemetryHub:
    """Aggregates forwarded-traffic samples and answers live stats queries.

    record() is cheap and thread safe; it is fed from the storage thread, not
    the forwarding workers.  Only samples younger than the largest configured
    window are retained.
    """

    def __init__(self, windows: Sequence[float] = DEFAULT_WINDOWS):
        if not windows or any(w <= 0 for w in windows):
            raise ValueError("windows must be positive")
        self.windows = tuple(sorted(windows))
        self._horizon = max(self.windows)
        self._samples: deque[TraceSample] = deque()
        self._lock = threading.Lock()
        self.total_up_bytes = 0
        self.total_down_bytes = 0

    def record(self, sample: TraceSample) -> None:
        with self._lock:
            self._samples.append(sample)
            if sample.direction == Direction.UP:
                self.total_up_bytes += sample.nbytes
            else:
                self.total_down_bytes += sample.nbytes
            cutoff = sample.timestamp - self._horizon
            while self._samples and self._samples[0].timestamp <= cutoff:
                self._samples.popleft()

    def stats(self, now: Optional[float] = None) -> list[dict]:
        """One report per window: {window, mbps_up, mbps_down, per_app}."""
        if now is None:
            now = time.time()
        with self._lock:
            samples = list(self._samples)
        reports = []
        for w in self.windows:
            up = 0
            down = 0
            per_app: dict[str, dict[str, float]] = {}
            for s in samples:
                if not (now - w < s.timestamp <= now):
                    continue
                if s.direction == Direction.UP:
                    up += s.nbytes
                else:
                    down += s.nbytes
                if s.app_id:
                    slot = per_app.setdefault(s.app_id, {"mbps_up": 0.0, "mbps_down": 0.0})
                    key = "mbps_up" if s.direction == Direction.UP else "mbps_down"
                    slot[key] += s.nbytes
            for slot in per_app.values():
                slot["mbps_up"] = slot["mbps_up"] * 8.0 / w / 1e6
                slot["mbps_down"] = slot["mbps_down"] * 8.0 / w / 1e6
            reports.append(
                {
                    "window": w,
                    "mbps_up": up * 8.0 / w / 1e6,
                    "mbps_down": down * 8.0 / w / 1e6,
                    "per_app": per_app,
                }
            )
        return reports

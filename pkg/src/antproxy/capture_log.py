"""PCAPNG packet logging with contextual annotations.

Files carry one Section Header Block, one Interface Description Block
(linktype RAW IP), then one Enhanced Packet Block per logged datagram.
Context (app name, direction, network state) rides in standard comment
options as "antmon.<key>=<value>" strings, so any generic pcapng tool can
still read the files.

Logging is decoupled from forwarding by a bounded queue and two storage
threads; when the queue is full the packet is dropped from the log only and
counted, never from forwarding.
"""

from __future__ import annotations

import os
import queue
import struct
import threading
import time
import urllib.error
import urllib.request
import uuid
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence

from .packet import PROTO_TCP, PROTO_UDP

SHB_TYPE = 0x0A0D0D0A
IDB_TYPE = 0x00000001
EPB_TYPE = 0x00000006
BYTE_ORDER_MAGIC = 0x1A2B3C4D
LINKTYPE_RAW_IP = 101

OPT_END = 0
OPT_COMMENT = 1

ANNOTATION_PREFIX = "antmon."
ANNOTATION_KEYS = ("app", "netstate", "rssi", "location", "direction")

DEFAULT_ROTATE_BYTES = 64 * 1024 * 1024


class CaptureError(Exception):
    pass


class IoFailure(CaptureError):
    pass


class LogMode(str, Enum):
    FULL_PACKET = "full"
    HEADERS_ONLY = "headers"
    OFF = "off"


@dataclass
class LogPolicy:
    mode: LogMode = LogMode.FULL_PACKET
    rotate_bytes: int = DEFAULT_ROTATE_BYTES
    app_enabled: dict = field(default_factory=dict)
    default_enabled: bool = True

    def app_allowed(self, app_id: Optional[str]) -> bool:
        if app_id is None:
            return self.default_enabled
        return self.app_enabled.get(app_id, self.default_enabled)


def _pad4(data: bytes) -> bytes:
    return data + b"\x00" * (-len(data) % 4)


def _options_bytes(options: Sequence[tuple[int, bytes]]) -> bytes:
    if not options:
        return b""
    out = b"".join(
        struct.pack("<HH", code, len(value)) + _pad4(value) for code, value in options
    )
    return out + struct.pack("<HH", OPT_END, 0)


def _block(block_type: int, body: bytes) -> bytes:
    body = _pad4(body)
    total = 12 + len(body)
    return struct.pack("<II", block_type, total) + body + struct.pack("<I", total)


def section_header_block() -> bytes:
    body = struct.pack("<IHHq", BYTE_ORDER_MAGIC, 1, 0, -1)
    return _block(SHB_TYPE, body)


def interface_description_block(linktype: int = LINKTYPE_RAW_IP) -> bytes:
    body = struct.pack("<HHI", linktype, 0, 0)
    return _block(IDB_TYPE, body)


def annotation_options(annotations: Mapping[str, str]) -> list[tuple[int, bytes]]:
    return [
        (OPT_COMMENT, f"{ANNOTATION_PREFIX}{key}={value}".encode("utf-8"))
        for key, value in annotations.items()
    ]


# direction-only annotations repeat for every packet; cache their encoding
_OPTS_MEMO: dict = {}


def _opts_for(annotations: Mapping[str, str]) -> bytes:
    if not annotations:
        return b""
    if len(annotations) == 1:
        item = next(iter(annotations.items()))
        cached = _OPTS_MEMO.get(item)
        if cached is None and len(_OPTS_MEMO) < 64:
            cached = _OPTS_MEMO[item] = _options_bytes(annotation_options(annotations))
        if cached is not None:
            return cached
    return _options_bytes(annotation_options(annotations))


_EPB_HEAD = struct.Struct("<IIIIIII").pack
_U32 = struct.Struct("<I").pack
_PADS = (b"", b"\x00", b"\x00\x00", b"\x00\x00\x00")


def _epb_raw(data: bytes, ts_us: int, original_len: int, opts: bytes) -> bytes:
    pad = b"\x00" * (-len(data) % 4)
    # single join keeps this to one copy of the payload; it runs per packet
    total = 32 + len(data) + len(pad) + len(opts)
    return b"".join((
        _EPB_HEAD(
            EPB_TYPE,
            total,
            0,
            (ts_us >> 32) & 0xFFFFFFFF,
            ts_us & 0xFFFFFFFF,
            len(data),
            original_len,
        ),
        data,
        pad,
        opts,
        _U32(total),
    ))


def enhanced_packet_block(
    data: bytes,
    timestamp: float,
    original_len: Optional[int] = None,
    annotations: Optional[Mapping[str, str]] = None,
) -> bytes:
    return _epb_raw(
        data,
        int(timestamp * 1_000_000),
        original_len if original_len is not None else len(data),
        _opts_for(annotations or {}),
    )


def _header_len(data: bytes) -> int:
    """IP header + transport header length of a raw datagram (best effort)."""
    if len(data) < 20:
        return len(data)
    ihl = (data[0] & 0x0F) * 4
    proto = data[9]
    if proto == PROTO_TCP and len(data) >= ihl + 13:
        return min(len(data), ihl + ((data[ihl + 12] >> 4) * 4))
    if proto == PROTO_UDP:
        return min(len(data), ihl + 8)
    return min(len(data), ihl)


class CaptureWriter:
    """Single-owner PCAPNG writer with size-based rotation.

    Opening a path that already exists renames the old file with a timestamp
    suffix first; the active capture always lives at the configured path.
    """

    def __init__(
        self,
        path,
        linktype: int = LINKTYPE_RAW_IP,
        policy: Optional[LogPolicy] = None,
    ):
        self.path = Path(path)
        self.linktype = linktype
        self.policy = policy or LogPolicy()
        self.rotated: list[Path] = []
        self.packets_written = 0
        self._bytes = 0
        self._fh = None
        self._fd = -1
        self._open_fresh()

    def _rotate_name(self) -> Path:
        stamp = time.strftime("%Y%m%dT%H%M%S")
        candidate = self.path.with_name(f"{self.path.name}.{stamp}")
        n = 0
        while candidate.exists():
            n += 1
            candidate = self.path.with_name(f"{self.path.name}.{stamp}.{n}")
        return candidate

    def _open_fresh(self) -> None:
        try:
            if self.path.exists():
                rotated = self._rotate_name()
                self.path.rename(rotated)
                self.rotated.append(rotated)
            # unbuffered on purpose: the hot path emits each block with one
            # writev, so a userspace buffer would only add a copy of every
            # payload plus a GIL-held flush when it fills
            self._fh = open(self.path, "wb", buffering=0)
            self._fd = self._fh.fileno()
            header = section_header_block() + interface_description_block(self.linktype)
            self._fh.write(header)
            self._bytes = len(header)
        except OSError as exc:
            raise IoFailure(f"cannot open capture at {self.path}: {exc}") from exc

    def log_packet(
        self,
        data: bytes,
        annotations: Optional[Mapping[str, str]] = None,
        timestamp: Optional[float] = None,
    ) -> bool:
        """Append one EPB, honoring the log policy.  Returns True if written."""
        if self._fh is None:
            raise IoFailure("writer is closed")
        policy = self.policy
        if policy.mode is LogMode.OFF:
            return False
        app_id = (annotations or {}).get("app")
        if not policy.app_allowed(app_id):
            return False
        captured = data
        if policy.mode is LogMode.HEADERS_ONLY:
            captured = data[: _header_len(data)]
        block = enhanced_packet_block(
            bytes(captured),
            timestamp if timestamp is not None else time.time(),
            original_len=len(data),
            annotations=annotations,
        )
        try:
            self._fh.write(block)
        except OSError as exc:
            raise IoFailure(f"write failed: {exc}") from exc
        self._bytes += len(block)
        self.packets_written += 1
        if self._bytes >= policy.rotate_bytes:
            self._do_rotate()
        return True

    def log_packet_opts(self, data: bytes, timestamp: float, opts: bytes) -> bool:
        """log_packet with a pre-encoded options blob and no app filtering.

        The storage sink's hot path: annotation encoding, the filter lookup,
        and the per-call dict have all been hoisted out by the caller.
        """
        fh = self._fh
        if fh is None:
            raise IoFailure("writer is closed")
        mode = self.policy.mode
        if mode is LogMode.OFF:
            return False
        captured = data if mode is LogMode.FULL_PACKET else data[: _header_len(data)]
        ts_us = int(timestamp * 1_000_000)
        pad = -len(captured) % 4
        total = 32 + len(captured) + pad + len(opts)
        bufs = (
            _EPB_HEAD(
                EPB_TYPE,
                total,
                0,
                (ts_us >> 32) & 0xFFFFFFFF,
                ts_us & 0xFFFFFFFF,
                len(captured),
                len(data),
            ),
            captured,
            _PADS[pad] + opts + _U32(total),
        )
        try:
            # writev straight to the page cache: the payload is copied once,
            # outside the GIL, with no buffer fill stalling other threads
            n = os.writev(self._fd, bufs)
            if n != total:
                # regular files only short-write on hard limits; finish the
                # block so the stream is not left mid-record
                rest = b"".join(bufs)[n:]
                while rest:
                    rest = rest[os.write(self._fd, rest):]
        except OSError as exc:
            raise IoFailure(f"write failed: {exc}") from exc
        self._bytes += total
        self.packets_written += 1
        if self._bytes >= self.policy.rotate_bytes:
            self._do_rotate()
        return True

    def log_batch(self, items) -> int:
        """Write many (data, timestamp, opts) records with one writev.

        The iovec list is built under the interpreter lock, but the payload
        copy into the page cache happens with the lock released, once per
        batch instead of once per packet.  Rotation is checked after the
        batch, so the size cap is a soft limit by up to one batch.
        """
        if self._fh is None:
            raise IoFailure("writer is closed")
        mode = self.policy.mode
        if mode is LogMode.OFF:
            return 0
        full = mode is LogMode.FULL_PACKET
        iov = []
        push = iov.append
        grand = 0
        for data, timestamp, opts in items:
            captured = data if full else data[: _header_len(data)]
            ts_us = int(timestamp * 1_000_000)
            pad = -len(captured) % 4
            total = 32 + len(captured) + pad + len(opts)
            push(
                _EPB_HEAD(
                    EPB_TYPE,
                    total,
                    0,
                    (ts_us >> 32) & 0xFFFFFFFF,
                    ts_us & 0xFFFFFFFF,
                    len(captured),
                    len(data),
                )
            )
            push(captured)
            push(_PADS[pad] + opts + _U32(total))
            grand += total
        try:
            n = os.writev(self._fd, iov)
            if n != grand:
                rest = b"".join(iov)[n:]
                while rest:
                    rest = rest[os.write(self._fd, rest):]
        except OSError as exc:
            raise IoFailure(f"write failed: {exc}") from exc
        self._bytes += grand
        self.packets_written += len(items)
        if self._bytes >= self.policy.rotate_bytes:
            self._do_rotate()
        return len(items)

    def _do_rotate(self) -> None:
        self.flush()
        self._fh.close()
        self._fh = None
        self._open_fresh()

    def flush(self) -> None:
        if self._fh is not None:
            try:
                self._fh.flush()
            except OSError as exc:
                raise IoFailure(f"flush failed: {exc}") from exc

    def close(self) -> None:
        if self._fh is not None:
            self.flush()
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# reading / validation (used by the CLI; tests carry their own minimal reader)


@dataclass
class CapturedPacket:
    timestamp: float
    data: bytes
    original_len: int
    annotations: dict


def iter_blocks(data: bytes) -> Iterator[tuple[int, bytes]]:
    """Yield (block_type, body) pairs; raises CaptureError on structure bugs."""
    off = 0
    n = len(data)
    while off < n:
        if n - off < 12:
            raise CaptureError(f"trailing garbage at offset {off}")
        btype, total = struct.unpack_from("<II", data, off)
        if total < 12 or total % 4 != 0:
            raise CaptureError(f"bad block length {total} at offset {off}")
        if off + total > n:
            raise CaptureError(f"block at offset {off} overruns file")
        (trailer,) = struct.unpack_from("<I", data, off + total - 4)
        if trailer != total:
            raise CaptureError(
                f"length mismatch at offset {off}: leading {total} trailing {trailer}"
            )
        yield btype, data[off + 8 : off + total - 4]
        off += total


def _parse_options(raw: bytes) -> list[tuple[int, bytes]]:
    options = []
    off = 0
    while off + 4 <= len(raw):
        code, length = struct.unpack_from("<HH", raw, off)
        off += 4
        if code == OPT_END:
            break
        options.append((code, raw[off : off + length]))
        off += length + (-length % 4)
    return options


def parse_epb(body: bytes) -> CapturedPacket:
    if len(body) < 20:
        raise CaptureError("EPB body too short")
    _iface, high, low, captured_len, original_len = struct.unpack_from("<IIIII", body, 0)
    data_end = 20 + captured_len
    if data_end > len(body):
        raise CaptureError("EPB captured length overruns block")
    data = body[20:data_end]
    opts_off = data_end + (-captured_len % 4)
    annotations = {}
    for code, value in _parse_options(body[opts_off:]):
        if code != OPT_COMMENT:
            continue
        text = value.decode("utf-8", errors="replace")
        if text.startswith(ANNOTATION_PREFIX) and "=" in text:
            key, _, val = text[len(ANNOTATION_PREFIX) :].partition("=")
            annotations[key] = val
    ts_us = (high << 32) | low
    return CapturedPacket(
        timestamp=ts_us / 1_000_000,
        data=data,
        original_len=original_len,
        annotations=annotations,
    )


def read_capture(path) -> list[CapturedPacket]:
    data = Path(path).read_bytes()
    packets = []
    for btype, body in iter_blocks(data):
        if btype == EPB_TYPE:
            packets.append(parse_epb(body))
    return packets


@dataclass
class CaptureSummary:
    ok: bool
    blocks: int = 0
    packets: int = 0
    bytes_captured: int = 0
    errors: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "blocks": self.blocks,
            "packets": self.packets,
            "bytes_captured": self.bytes_captured,
            "errors": self.errors,
        }


def validate_capture(path) -> CaptureSummary:
    """Structural validation: magic, lengths, alignment, block ordering."""
    summary = CaptureSummary(ok=True)
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        return CaptureSummary(ok=False, errors=[str(exc)])
    saw_shb = False
    saw_idb = False
    try:
        for btype, body in iter_blocks(data):
            summary.blocks += 1
            if summary.blocks == 1:
                if btype != SHB_TYPE:
                    raise CaptureError("file does not start with a section header")
                (magic,) = struct.unpack_from("<I", body, 0)
                if magic != BYTE_ORDER_MAGIC:
                    raise CaptureError(f"bad byte-order magic 0x{magic:08X}")
                saw_shb = True
            elif btype == IDB_TYPE:
                saw_idb = True
            elif btype == EPB_TYPE:
                if not saw_idb:
                    raise CaptureError("EPB before any interface description")
                pkt = parse_epb(body)
                summary.packets += 1
                summary.bytes_captured += len(pkt.data)
    except CaptureError as exc:
        summary.ok = False
        summary.errors.append(str(exc))
    if summary.ok and not saw_shb:
        summary.ok = False
        summary.errors.append("empty file")
    return summary


# ---------------------------------------------------------------------------
# upload


@dataclass
class TransferReport:
    files: list
    status: Optional[int] = None
    archived: bool = False
    retryable: bool = False
    error: Optional[str] = None


def upload_logs(
    endpoint: str,
    files: Sequence,
    archive_dir,
    timeout: float = 10.0,
) -> TransferReport:
    """POST closed capture files as one multipart/form-data request.

    On a 2xx response every file moves into ``archive_dir``; any failure
    leaves the files in place and marks the report retryable.
    """
    paths = [Path(p) for p in files]
    if not paths:
        return TransferReport(files=[])
    boundary = uuid.uuid4().hex
    parts = []
    for p in paths:
        try:
            content = p.read_bytes()
        except OSError as exc:
            return TransferReport(files=[str(p) for p in paths], retryable=True, error=str(exc))
        parts.append(
            f"--{boundary}\r\n"
            f'Content-Disposition: form-data; name="file"; filename="{p.name}"\r\n'
            f"Content-Type: application/octet-stream\r\n\r\n".encode("ascii")
            + content
            + b"\r\n"
        )
    body = b"".join(parts) + f"--{boundary}--\r\n".encode("ascii")
    req = urllib.request.Request(
        endpoint,
        data=body,
        headers={"Content-Type": f"multipart/form-data; boundary={boundary}"},
        method="POST",
    )
    report = TransferReport(files=[str(p) for p in paths])
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            report.status = resp.status
    except urllib.error.HTTPError as exc:
        report.status = exc.code
        report.retryable = True
        report.error = f"server returned {exc.code}"
        return report
    except (urllib.error.URLError, OSError) as exc:
        report.retryable = True
        report.error = str(exc)
        return report
    if 200 <= report.status < 300:
        archive = Path(archive_dir)
        archive.mkdir(parents=True, exist_ok=True)
        for p in paths:
            p.rename(archive / p.name)
        report.archived = True
    else:
        report.retryable = True
    return report


# ---------------------------------------------------------------------------
# storage pipeline


@dataclass(frozen=True, slots=True)
class LogEvent:
    """One forwarded datagram handed from the forwarder to storage."""

    timestamp: float
    wire: bytes
    direction: str  # "up" | "down"
    flow: object = None  # FlowKey; kept loose to avoid import cycles
    app_id: Optional[str] = None


class StorageSink:
    """Two storage threads behind one bounded queue.

    Thread 1 owns the capture writer; thread 2 feeds telemetry and resolves
    app names for new flows.  submit() never blocks the caller: a full queue
    drops the event from logging (counted) while forwarding continues.
    """

    def __init__(
        self,
        writer: Optional[CaptureWriter] = None,
        telemetry_cb: Optional[Callable] = None,
        resolve_cb: Optional[Callable] = None,
        annotate_cb: Optional[Callable] = None,
        queue_capacity: int = 4096,
    ):
        self.writer = writer
        self.telemetry_cb = telemetry_cb
        self.resolve_cb = resolve_cb
        self.annotate_cb = annotate_cb
        # deque + event instead of queue.Queue: submit runs on the forwarding
        # worker for every packet, and the lock/notify pair there is measurable
        self._q: deque = deque()
        self._q_cap = queue_capacity
        self._wake = threading.Event()
        self._relay: queue.Queue = queue.Queue(maxsize=queue_capacity * 4)
        # without consumers the relay hop is pure overhead per packet
        self._use_relay = telemetry_cb is not None or resolve_cb is not None
        self.dropped = 0
        self.relay_dropped = 0
        self.write_errors = 0
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def submit(self, event: LogEvent) -> bool:
        if len(self._q) >= self._q_cap:
            self.dropped += 1
            return False
        self._q.append(event)
        if not self._wake.is_set():
            self._wake.set()
        return True

    def start(self) -> None:
        if self._threads:
            return
        self._stop.clear()
        self._threads = [
            threading.Thread(target=self._log_loop, name="storage-log", daemon=True),
        ]
        if self._use_relay:
            self._threads.append(
                threading.Thread(
                    target=self._telemetry_loop, name="storage-telemetry", daemon=True
                )
            )
        for t in self._threads:
            t.start()

    @staticmethod
    def _deprioritize() -> None:
        # storage is throughput work, not interactive: SCHED_BATCH keeps the
        # fair cpu share but stops every poll wakeup from preempting a
        # forwarding worker mid-quantum, which otherwise shows up as a
        # variable tax on the hot path
        try:
            os.sched_setscheduler(0, os.SCHED_BATCH, os.sched_param(0))
        except (AttributeError, PermissionError, OSError):
            pass

    def _log_loop(self) -> None:
        self._deprioritize()
        q = self._q
        writer = self.writer
        # with no annotation callback the options blob depends only on the
        # direction; encoding it here removes a dict build and two calls per
        # packet from a loop that shares its core with the forwarding workers
        fast_opts = None
        if (
            writer is not None
            and self.annotate_cb is None
            and writer.policy.default_enabled
        ):
            fast_opts = {
                d: _options_bytes(annotation_options({"direction": d}))
                for d in ("up", "down")
            }
        use_relay = self._use_relay
        quiet = 0
        while True:
            if q:
                quiet = 0
                batch: list = []
                take = batch.append
                while q and len(batch) < 256:
                    take(q.popleft())
                if fast_opts is not None:
                    self._write_fast_batch(batch, writer, fast_opts, use_relay)
                else:
                    for event in batch:
                        self._log_one(event)
                # yield so the forwarding workers are not held off the
                # interpreter for a whole backlog drain
                time.sleep(0)
                continue
            if self._stop.is_set():
                break
            quiet += 1
            if quiet < 50:
                # poll while traffic is flowing: submit stays a bare append
                # with no futex wake per packet, and the millisecond cadence
                # turns the drain into batches instead of a per-event
                # thread-switch tennis match with the forwarding workers
                time.sleep(0.002)
                continue
            self._wake.clear()
            if q:  # submit raced with the clear; nothing was lost
                continue
            self._wake.wait(0.1)

    def _write_fast_batch(self, batch, writer, fast_opts, use_relay: bool) -> None:
        items = []
        fast_events = []
        for event in batch:
            if event.app_id is None:
                items.append(
                    (event.wire, event.timestamp, fast_opts[event.direction])
                )
                fast_events.append(event)
            else:
                # keep file order: flush what is queued, then take the slow
                # path (which also relays the event itself)
                if items:
                    self._flush_items(writer, items)
                    items = []
                self._log_one(event)
        if items:
            self._flush_items(writer, items)
        if use_relay:
            for event in fast_events:
                try:
                    self._relay.put_nowait(event)
                except queue.Full:
                    self.relay_dropped += 1

    def _flush_items(self, writer, items) -> None:
        try:
            writer.log_batch(items)
        except IoFailure:
            self.write_errors += len(items)

    def _log_one(self, event: LogEvent) -> None:
        if self.writer is not None:
            annotations = {"direction": event.direction}
            if self.annotate_cb is not None:
                annotations.update(self.annotate_cb(event))
            elif event.app_id:
                annotations["app"] = event.app_id
            try:
                self.writer.log_packet(
                    event.wire, annotations=annotations, timestamp=event.timestamp
                )
            except IoFailure:
                self.write_errors += 1
        if self._use_relay:
            try:
                self._relay.put_nowait(event)
            except queue.Full:
                self.relay_dropped += 1

    def _telemetry_loop(self) -> None:
        self._deprioritize()
        while True:
            try:
                event = self._relay.get(timeout=0.1)
            except queue.Empty:
                if self._stop.is_set() and not self._q:
                    break
                continue
            if self.telemetry_cb is not None:
                self.telemetry_cb(event)
            if self.resolve_cb is not None:
                self.resolve_cb(event)

    def drain(self, timeout: float = 5.0) -> bool:
        """Wait for queued events to be processed (tests and shutdown)."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if not self._q and self._relay.empty():
                return True
            time.sleep(0.005)
        return False

    def stop(self) -> None:
        self._stop.set()
        self._wake.set()
        for t in self._threads:
            t.join(timeout=5.0)
        self._threads = []
        if self.writer is not None:
            self.writer.flush()

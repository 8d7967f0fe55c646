"""Flow-to-app attribution and the live flow table.

Attribution keys on the app-side local endpoint (ip, port).  Two backends
exist: PROCFS parses Linux /proc/net/{tcp,udp} tables and maps uids to app
names, and ORACLE is fed ground truth directly (simulation mode).  A lookup
miss triggers exactly one source refresh; resolution happens off the
forwarding workers, so a refresh never stalls packet processing.
"""

from __future__ import annotations

import copy
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

from .packet import FlowKey

UNKNOWN_APP = "unknown"

Endpoint = tuple[str, int]


class SourceUnavailable(Exception):
    """Attribution source could not be read; lookups fall back to unknown."""


@dataclass
class ProcfsTable:
    rows: list[tuple[Endpoint, Endpoint, int]]
    malformed: int = 0


def _decode_procfs_endpoint(text: str) -> Endpoint:
    # "0100007F:1F90" -> ("127.0.0.1", 8080); address hex is little-endian
    addr_hex, port_hex = text.split(":")
    if len(addr_hex) != 8 or len(port_hex) != 4:
        raise ValueError(f"bad endpoint {text!r}")
    ip = socket.inet_ntoa(struct.pack("<I", int(addr_hex, 16)))
    return ip, int(port_hex, 16)


def parse_procfs_table(text: str) -> ProcfsTable:
    """Parse /proc/net/{tcp,udp} content into (local, remote, uid) rows.

    Header and blank lines are skipped silently; anything else that fails to
    parse bumps the malformed counter instead of raising.
    """
    table = ProcfsTable(rows=[])
    for line in text.splitlines():
        fields = line.split()
        if not fields or fields[0] == "sl":
            continue
        try:
            if not fields[0].rstrip(":").isdigit() or len(fields) < 8:
                raise ValueError("not a table row")
            local = _decode_procfs_endpoint(fields[1])
            remote = _decode_procfs_endpoint(fields[2])
            uid = int(fields[7])
        except (ValueError, IndexError, struct.error):
            table.malformed += 1
            continue
        table.rows.append((local, remote, uid))
    return table


class OracleSource:
    """Ground-truth attribution for simulation: endpoint -> app_id."""

    name = "ORACLE"

    def __init__(self, mapping: Optional[Mapping[Endpoint, str]] = None):
        self._mapping: dict[Endpoint, str] = dict(mapping or {})
        self._lock = threading.Lock()

    def register(self, ip: str, port: int, app_id: str) -> None:
        with self._lock:
            self._mapping[(ip, port)] = app_id

    def unregister(self, ip: str, port: int) -> None:
        with self._lock:
            self._mapping.pop((ip, port), None)

    def refresh(self) -> dict[Endpoint, str]:
        with self._lock:
            return dict(self._mapping)


class ProcfsSource:
    """Attribution from Linux procfs network tables.

    ``uid_map`` translates uids to app names; unmapped uids become "uid:<n>"
    so the flow is still distinguishable.
    """

    name = "PROCFS"

    def __init__(
        self,
        paths: Iterable[str] = ("/proc/net/tcp", "/proc/net/udp"),
        uid_map: Optional[Mapping[int, str]] = None,
    ):
        self.paths = tuple(paths)
        self.uid_map = dict(uid_map or {})
        self.malformed_total = 0

    def refresh(self) -> dict[Endpoint, str]:
        mapping: dict[Endpoint, str] = {}
        read_any = False
        for path in self.paths:
            try:
                with open(path, "r", encoding="ascii", errors="replace") as fh:
                    table = parse_procfs_table(fh.read())
            except OSError:
                continue
            read_any = True
            self.malformed_total += table.malformed
            for local, _remote, uid in table.rows:
                mapping[local] = self.uid_map.get(uid, f"uid:{uid}")
        if not read_any:
            raise SourceUnavailable(f"no readable table among {self.paths}")
        return mapping


class AppMap:
    """Endpoint -> app cache over an attribution source.

    Reads hit an immutable snapshot dict without locking; a miss re-reads the
    source once and atomically publishes a merged snapshot (entries never
    vanish while still reported by the source).
    """

    def __init__(self, source):
        self.source = source
        self._snapshot: dict[Endpoint, str] = {}
        self._refresh_lock = threading.Lock()
        self.refresh_count = 0
        self.unavailable_count = 0

    def refresh(self) -> None:
        with self._refresh_lock:
            try:
                fresh = self.source.refresh()
            except SourceUnavailable:
                self.unavailable_count += 1
                return
            finally:
                self.refresh_count += 1
            merged = dict(self._snapshot)
            merged.update(fresh)
            self._snapshot = merged

    def lookup_endpoint(self, ip: str, port: int) -> str:
        app = self._snapshot.get((ip, port))
        if app is not None:
            return app
        self.refresh()
        return self._snapshot.get((ip, port), UNKNOWN_APP)

    def lookup_app(self, key: FlowKey) -> str:
        """App for a flow, keyed by its app-side (source) endpoint."""
        return self.lookup_endpoint(key.src_ip, key.src_port)


# ---------------------------------------------------------------------------
# live flow table


@dataclass
class FlowRecord:
    key: FlowKey
    app_id: str = UNKNOWN_APP
    start_ts: float = 0.0
    end_ts: float = 0.0
    up_pkts: int = 0
    up_bytes: int = 0
    down_pkts: int = 0
    down_bytes: int = 0
    state: str = "NEW"

    def to_json(self) -> dict:
        return {
            "key": str(self.key),
            "protocol": self.key.protocol,
            "src_ip": self.key.src_ip,
            "src_port": self.key.src_port,
            "dst_ip": self.key.dst_ip,
            "dst_port": self.key.dst_port,
            "app_id": self.app_id,
            "start_ts": self.start_ts,
            "end_ts": self.end_ts,
            "up_pkts": self.up_pkts,
            "up_bytes": self.up_bytes,
            "down_pkts": self.down_pkts,
            "down_bytes": self.down_bytes,
            "state": self.state,
        }


class FlowTable:
    """Live per-flow counters shared between the forwarder and the API.

    touch() is called from the forwarding path, so it only bumps counters
    under a short lock.  App attribution is filled in later (storage thread)
    via resolve_apps().
    """

    def __init__(self):
        self._records: dict[FlowKey, FlowRecord] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def touch(
        self,
        key: FlowKey,
        *,
        up: bool,
        nbytes: int,
        now: float,
        state: Optional[str] = None,
    ) -> FlowRecord:
        with self._lock:
            rec = self._records.get(key)
            if rec is None:
                rec = FlowRecord(key=key, start_ts=now, end_ts=now)
                self._records[key] = rec
            rec.end_ts = max(rec.end_ts, now)
            if up:
                rec.up_pkts += 1
                rec.up_bytes += nbytes
            else:
                rec.down_pkts += 1
                rec.down_bytes += nbytes
            if state is not None:
                rec.state = state
            return rec

    def set_state(self, key: FlowKey, state: str) -> None:
        with self._lock:
            rec = self._records.get(key)
            if rec is not None:
                rec.state = state

    def get_app(self, key: FlowKey) -> Optional[str]:
        with self._lock:
            rec = self._records.get(key)
            if rec is None or rec.app_id == UNKNOWN_APP:
                return None
            return rec.app_id

    def resolve_apps(self, appmap: AppMap) -> int:
        """Attribute any still-unknown flows; returns how many got resolved."""
        with self._lock:
            pending = [r.key for r in self._records.values() if r.app_id == UNKNOWN_APP]
        resolved = 0
        for key in pending:
            app = appmap.lookup_app(key)
            if app != UNKNOWN_APP:
                with self._lock:
                    rec = self._records.get(key)
                    if rec is not None:
                        rec.app_id = app
                        resolved += 1
        return resolved

    def snapshot(self) -> list[FlowRecord]:
        """Point-in-time copy of all records."""
        with self._lock:
            return [copy.copy(r) for r in self._records.values()]

    def prune(self, older_than: float) -> int:
        """Drop flows idle since before ``older_than``; returns count removed."""
        with self._lock:
            stale = [k for k, r in self._records.items() if r.end_ts < older_than]
            for k in stale:
                del self._records[k]
            return len(stale)

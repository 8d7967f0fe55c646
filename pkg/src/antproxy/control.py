"""CLI, HTTP/SSE API, and the bench harness.

The service object here is the composition root: it owns the TUN, the
engine, DPI state, capture logging, telemetry, and the API server, and wires
them together.  API handlers never reach into forwarder-owned state; they
read published snapshots (flow table copies, counter structs, telemetry
aggregates) and mutate through locked stores (policies, patterns), so a
policy POST is visible to the very next inspected packet.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import queue
import signal
import sys
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional
from urllib.parse import parse_qs, urlparse

from .appstack import AppStack
from .capture_log import (
    DEFAULT_ROTATE_BYTES,
    CaptureWriter,
    LogMode,
    LogPolicy,
    StorageSink,
    read_capture,
    validate_capture,
)
from .dpi import (
    Action,
    DpiContext,
    LeakHistory,
    Pattern,
    PolicyStore,
    compile_ruleset,
    default_patterns,
    load_patterns,
    pattern_from_json,
    pattern_to_json,
)
from .flow_context import AppMap, FlowTable, OracleSource, UNKNOWN_APP
from .forwarder import Engine, ForwarderConfig
from .net_harness import SimNet, TunPort, content_block, stream_hash
from .packet import PROTO_TCP, parse_datagram
from .telemetry import (
    DEFAULT_WINDOWS,
    Direction,
    TelemetryHub,
    TraceSample,
    connect_latency,
    export_features,
    extract_features,
    record_from_datagram,
)

APP_IP = "10.0.2.15"
DEFAULT_API_ADDR = "127.0.0.1:8790"


class ControlError(Exception):
    pass


class ScenarioSetupFailure(ControlError):
    pass


def _env_api_addr() -> str:
    return os.environ.get("ANTPROXY_API_ADDR", DEFAULT_API_ADDR)


def _env_log_dir() -> str:
    return os.environ.get("ANTPROXY_LOG_DIR", "antproxy-logs")


def parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ControlError(f"bad address {text!r}, want host:port")
    return host, int(port)


@dataclass
class EngineConfig:
    mtu: int = 16384
    backend: str = "sim"
    log_mode: str = "full"
    log_dir: Optional[str] = None
    rotate_bytes: int = DEFAULT_ROTATE_BYTES
    dpi: bool = False
    pattern_file: Optional[str] = None
    windows: tuple = DEFAULT_WINDOWS
    api_addr: Optional[str] = None
    queue_capacity: int = 512
    pending_cap: int = 1024 * 1024
    udp_idle_timeout: float = 60.0
    scrub_seed: int = 1337
    sim_seed: int = 0
    tun_name: str = "ant0"

    def validate(self) -> "EngineConfig":
        if not 576 <= self.mtu <= 65535:
            raise ControlError(f"mtu {self.mtu} outside [576, 65535]")
        if self.backend not in ("sim", "os"):
            raise ControlError(f"backend {self.backend!r} not sim/os")
        if self.log_mode not in ("full", "headers", "off"):
            raise ControlError(f"log_mode {self.log_mode!r} not full/headers/off")
        for name in ("rotate_bytes", "queue_capacity", "pending_cap"):
            if getattr(self, name) <= 0:
                raise ControlError(f"{name} must be > 0")
        return self

    def forwarder_config(self) -> ForwarderConfig:
        return ForwarderConfig(
            mtu=self.mtu,
            queue_capacity=self.queue_capacity,
            pending_cap=self.pending_cap,
            udp_idle_timeout=self.udp_idle_timeout,
        )


class EventBus:
    """Fan-out for the SSE stream; slow subscribers lose events, not the engine."""

    def __init__(self, capacity: int = 512):
        self.capacity = capacity
        self._subs: list[queue.Queue] = []
        self._lock = threading.Lock()

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=self.capacity)
        with self._lock:
            self._subs.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            try:
                self._subs.remove(q)
            except ValueError:
                pass

    def publish(self, event_type: str, data: dict) -> None:
        with self._lock:
            subs = list(self._subs)
        for q in subs:
            try:
                q.put_nowait((event_type, data))
            except queue.Full:
                pass


class ProxyService:
    """Everything one running proxy needs, wired together."""

    def __init__(
        self,
        config: Optional[EngineConfig] = None,
        sim_setup: Optional[Callable[[SimNet], None]] = None,
    ):
        self.config = (config or EngineConfig()).validate()
        self.log_dir = Path(self.config.log_dir or _env_log_dir())
        self.log_dir.mkdir(parents=True, exist_ok=True)

        self.net: Optional[SimNet] = None
        if self.config.backend == "sim":
            self.net = SimNet(seed=self.config.sim_seed)
            if sim_setup is not None:
                sim_setup(self.net)

        if self.config.pattern_file:
            patterns = load_patterns(self.config.pattern_file)
        else:
            patterns = default_patterns()
        self.patterns: dict[str, Pattern] = {p.pattern_id: p for p in patterns}
        self.policies = PolicyStore(self.log_dir / "policies.jsonl")
        self.history = LeakHistory(self.log_dir / "leaks.jsonl")
        self.dpi_ctx = DpiContext(
            ruleset=None,
            policies=self.policies,
            history=self.history,
            scrub_seed=self.config.scrub_seed,
        )
        if self.config.dpi:
            self._rebuild_ruleset()

        self.flow_table = FlowTable()
        self.oracle = OracleSource()
        self.appmap = AppMap(self.oracle)
        self.telemetry = TelemetryHub(self.config.windows)
        self.bus = EventBus()
        self.dpi_ctx.listeners.append(
            lambda ev: self.bus.publish("leak", ev.to_json())
        )

        self.writer: Optional[CaptureWriter] = None
        self.sink: Optional[StorageSink] = None
        if self.config.log_mode != "off":
            mode = LogMode.FULL_PACKET if self.config.log_mode == "full" else LogMode.HEADERS_ONLY
            self.writer = CaptureWriter(
                self.log_dir / "capture.pcapng",
                policy=LogPolicy(mode=mode, rotate_bytes=self.config.rotate_bytes),
            )
        self.sink = StorageSink(
            writer=self.writer,
            telemetry_cb=self._telemetry_event,
            annotate_cb=self._annotate_event,
        )

        self.tun: Optional[TunPort] = None
        self.engine: Optional[Engine] = None
        self._api_server: Optional[ThreadingHTTPServer] = None
        self._api_thread: Optional[threading.Thread] = None
        self._poller: Optional[threading.Thread] = None
        self._stopping = threading.Event()
        self._last_flows_json: Optional[str] = None

    # -- storage callbacks -------------------------------------------------

    def _app_for_flow(self, flow) -> str:
        if flow is None:
            return UNKNOWN_APP
        app = self.flow_table.get_app(flow)
        if app is not None and app != UNKNOWN_APP:
            return app
        return self.appmap.lookup_app(flow)

    def _telemetry_event(self, event) -> None:
        self.telemetry.record(
            TraceSample(
                timestamp=event.timestamp,
                direction=Direction.UP if event.direction == "up" else Direction.DOWN,
                nbytes=len(event.wire),
                flow=event.flow,
                app_id=self._app_for_flow(event.flow),
            )
        )

    def _annotate_event(self, event) -> dict:
        ann = {}
        if event.flow is not None:
            ann["flow"] = str(event.flow)
            ann["app"] = self._app_for_flow(event.flow)
        return ann

    # -- pattern store -----------------------------------------------------

    def _rebuild_ruleset(self) -> None:
        if not self.config.dpi:
            return
        plist = list(self.patterns.values())
        self.dpi_ctx.set_ruleset(compile_ruleset(plist) if plist else None)

    def add_pattern(self, p: Pattern) -> bool:
        if p.pattern_id in self.patterns:
            return False
        self.patterns[p.pattern_id] = p
        self._rebuild_ruleset()
        return True

    def remove_pattern(self, pattern_id: str) -> bool:
        if pattern_id not in self.patterns:
            return False
        del self.patterns[pattern_id]
        self._rebuild_ruleset()
        return True

    # -- lifecycle ---------------------------------------------------------

    def start_engine(self) -> None:
        if self.engine is not None and self.engine.running:
            return
        if self.config.backend == "sim":
            self.tun = TunPort(mtu=self.config.mtu)
            resolver = self.net.route if self.net is not None else None
        else:
            from .os_tun import OsTunPort

            self.tun = OsTunPort(name=self.config.tun_name, mtu=self.config.mtu)
            resolver = None
        self.engine = Engine(
            self.tun,
            config=self.config.forwarder_config(),
            resolver=resolver,
            dpi=self.dpi_ctx if self.config.dpi else None,
            sink=self.sink,
            flow_table=self.flow_table,
            appmap=self.appmap,
        )
        self.engine.start()

    def stop_engine(self) -> None:
        if self.engine is not None:
            self.engine.stop()
        if self.tun is not None:
            self.tun.close()
            self.tun = None

    def start(self) -> "ProxyService":
        if self.net is not None:
            self.net.start()
        self.sink.start()
        self.start_engine()
        self._poller = threading.Thread(
            target=self._poll_flows, name="antproxy-poller", daemon=True
        )
        self._poller.start()
        return self

    def stop(self) -> None:
        self._stopping.set()
        self.stop_api()
        self.stop_engine()
        if self._poller is not None:
            self._poller.join(timeout=3.0)
        if self.sink is not None:
            self.sink.stop()
        if self.writer is not None:
            self.writer.close()
        if self.net is not None:
            self.net.stop()

    def _poll_flows(self) -> None:
        while not self._stopping.wait(1.0):
            flows = self.flows_json()
            blob = json.dumps(flows, sort_keys=True)
            if blob != self._last_flows_json:
                self._last_flows_json = blob
                self.bus.publish("flows", {"flows": flows})

    # -- snapshots for the API --------------------------------------------

    def flows_json(self) -> list[dict]:
        self.flow_table.resolve_apps(self.appmap)
        return [rec.to_json() for rec in self.flow_table.snapshot()]

    def stats_json(self) -> dict:
        return {
            "engine": self.engine.stats() if self.engine is not None else None,
            "telemetry": self.telemetry.stats(),
            "totals": {
                "bytes_up": self.telemetry.total_up_bytes,
                "bytes_down": self.telemetry.total_down_bytes,
            },
            "dpi": {
                "enabled": self.config.dpi,
                "patterns": len(self.patterns),
                "inspected": self.dpi_ctx.inspected,
                "blocked": self.dpi_ctx.blocked,
                "scrubbed": self.dpi_ctx.scrubbed,
            },
            "logging": {
                "mode": self.config.log_mode,
                "packets_written": self.writer.packets_written if self.writer else 0,
                "dropped": self.sink.dropped if self.sink else 0,
            },
        }

    # -- API server --------------------------------------------------------

    def serve_api(self, addr: Optional[str] = None) -> tuple[str, int]:
        if self._api_server is not None:
            return self._api_server.server_address[:2]
        host, port = parse_addr(addr or self.config.api_addr or _env_api_addr())
        server = _ApiServer((host, port), ApiHandler, service=self)
        self._api_server = server
        self._api_thread = threading.Thread(
            target=server.serve_forever, name="antproxy-api", daemon=True
        )
        self._api_thread.start()
        return server.server_address[:2]

    def stop_api(self) -> None:
        if self._api_server is not None:
            self._api_server.shutdown()
            self._api_server.server_close()
            self._api_server = None
        if self._api_thread is not None:
            self._api_thread.join(timeout=3.0)
            self._api_thread = None


class _ApiServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, handler, service: ProxyService):
        self.service = service
        super().__init__(addr, handler)


class ApiHandler(BaseHTTPRequestHandler):
    server_version = "antproxy"
    protocol_version = "HTTP/1.1"

    @property
    def service(self) -> ProxyService:
        return self.server.service  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):
        pass

    def _json(self, code: int, obj) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _error(self, code: int, message: str) -> None:
        self._json(code, {"error": message})

    def _body(self) -> Optional[dict]:
        try:
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length) if length else b""
            obj = json.loads(raw.decode("utf-8")) if raw else {}
            if not isinstance(obj, dict):
                return None
            return obj
        except (ValueError, UnicodeDecodeError):
            return None

    # -- GET ---------------------------------------------------------------

    def do_GET(self):
        url = urlparse(self.path)
        if url.path == "/flows":
            self._json(200, {"flows": self.service.flows_json()})
        elif url.path == "/leaks":
            qs = parse_qs(url.query)
            since = 0.0
            if "since" in qs:
                try:
                    since = float(qs["since"][0])
                except ValueError:
                    return self._error(400, "since must be a number")
            events = self.service.history.since(since)
            self._json(200, {"leaks": [e.to_json() for e in events]})
        elif url.path == "/stats":
            self._json(200, self.service.stats_json())
        elif url.path == "/patterns":
            self._json(
                200,
                {"patterns": [pattern_to_json(p) for p in self.service.patterns.values()]},
            )
        elif url.path == "/events":
            self._serve_events()
        else:
            self._error(404, f"no route {url.path}")

    def _serve_events(self):
        svc = self.service
        q = svc.bus.subscribe()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(b": connected\n\n")
            self.wfile.flush()
            while not svc._stopping.is_set():
                try:
                    event_type, data = q.get(timeout=5.0)
                except queue.Empty:
                    self.wfile.write(b": keepalive\n\n")
                    self.wfile.flush()
                    continue
                payload = json.dumps(data)
                self.wfile.write(f"event: {event_type}\ndata: {payload}\n\n".encode())
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            svc.bus.unsubscribe(q)
            self.close_connection = True

    # -- POST --------------------------------------------------------------

    def do_POST(self):
        url = urlparse(self.path)
        if url.path == "/policy":
            body = self._body()
            if body is None:
                return self._error(400, "body must be a JSON object")
            missing = [k for k in ("app_id", "pattern_id", "action") if k not in body]
            if missing:
                return self._error(400, f"missing fields: {', '.join(missing)}")
            try:
                action = Action(str(body["action"]).upper())
            except ValueError:
                return self._error(400, f"unknown action {body['action']!r}")
            app_id = str(body["app_id"])
            pattern_id = str(body["pattern_id"])
            if pattern_id not in self.service.patterns:
                return self._error(400, f"unknown pattern {pattern_id!r}")
            self.service.policies.set(app_id, pattern_id, action)
            self._json(200, {"ok": True, "app_id": app_id,
                             "pattern_id": pattern_id, "action": action.value})
        elif url.path == "/patterns":
            body = self._body()
            if body is None or "id" not in body or "pattern" not in body:
                return self._error(400, "need id and pattern fields")
            if not body["pattern"]:
                return self._error(400, "pattern must be non-empty")
            try:
                p = pattern_from_json(body)
            except (KeyError, ValueError) as e:
                return self._error(400, f"bad pattern: {e}")
            if not self.service.add_pattern(p):
                return self._error(409, f"pattern {p.pattern_id!r} already exists")
            self._json(201, {"ok": True, "id": p.pattern_id})
        elif url.path == "/engine/start":
            self.service.start_engine()
            self._json(200, {"running": True})
        elif url.path == "/engine/stop":
            self.service.stop_engine()
            self._json(200, {"running": False})
        else:
            self._error(404, f"no route {url.path}")

    def do_DELETE(self):
        url = urlparse(self.path)
        if url.path.startswith("/patterns/"):
            pid = url.path[len("/patterns/") :]
            if self.service.remove_pattern(pid):
                self._json(200, {"ok": True, "id": pid})
            else:
                self._error(404, f"no pattern {pid!r}")
        else:
            self._error(404, f"no route {url.path}")

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()


# -- bench harness ---------------------------------------------------------


@dataclass
class BenchScenario:
    kind: str
    size: int = 500_000_000
    dpi: bool = False
    log: bool = False
    seconds: float = 120.0
    flows: int = 16
    samples: int = 50

    KINDS = ("single_flow_down", "single_flow_up", "multi_flow_16", "idle", "latency")

    def validate(self) -> "BenchScenario":
        if self.kind not in self.KINDS:
            raise ScenarioSetupFailure(f"unknown scenario {self.kind!r}")
        if self.size <= 0:
            raise ScenarioSetupFailure("size must be > 0")
        return self


class _BenchRig:
    """SimNet + engine + app stack with the bench's dpi/log toggles."""

    def __init__(self, scenario: BenchScenario, config: EngineConfig, setup):
        self.scenario = scenario
        self.config = config
        self.net = SimNet(seed=config.sim_seed)
        setup(self.net)
        self.net.start()
        self.writer = None
        self.sink = None
        dpi_ctx = None
        if scenario.dpi:
            dpi_ctx = DpiContext(
                ruleset=compile_ruleset(default_patterns()),
                policies=PolicyStore(),
            )
        if scenario.log:
            log_dir = Path(config.log_dir or _env_log_dir())
            log_dir.mkdir(parents=True, exist_ok=True)
            self.writer = CaptureWriter(
                log_dir / f"bench-{scenario.kind}.pcapng",
                policy=LogPolicy(mode=LogMode.FULL_PACKET,
                                 rotate_bytes=config.rotate_bytes),
            )
            self.sink = StorageSink(writer=self.writer)
            self.sink.start()
        self.dpi_ctx = dpi_ctx
        self.tun = TunPort(mtu=config.mtu)
        self.engine = Engine(
            self.tun,
            config=config.forwarder_config(),
            resolver=self.net.route,
            dpi=dpi_ctx,
            sink=self.sink,
        )
        self.engine.start()
        self.app = AppStack(self.tun, ip=APP_IP)

    def close(self) -> dict:
        stats = self.engine.stats()
        self.app.close()
        self.engine.stop()
        self.tun.close()
        if self.sink is not None:
            self.sink.stop()
        if self.writer is not None:
            self.writer.close()
        self.net.stop()
        return stats

    def base_report(self, stats: dict) -> dict:
        return {
            "scenario": self.scenario.kind,
            "dpi": self.scenario.dpi,
            "log": self.scenario.log,
            "workers": stats["workers"],
            "fd_peak": stats["fd_peak"],
            "udp_sockets": stats["udp_socket_count"],
            "drops": stats["drops"],
            "bytes_up": stats["bytes_up"],
            "bytes_down": stats["bytes_down"],
        }


def _download_one(app: AppStack, ip: str, port: int, size: int, seed: int) -> dict:
    s = app.tcp_connect(ip, port, timeout=10.0)
    h = hashlib.sha256()
    got = 0
    t0 = time.monotonic()
    while True:
        chunk = s.recv(1 << 20, timeout=60.0)
        if not chunk:
            break
        h.update(chunk)
        got += len(chunk)
    seconds = time.monotonic() - t0
    s.close()
    return {
        "bytes": got,
        "seconds": seconds,
        "mbps": (got * 8 / seconds / 1e6) if seconds > 0 else 0.0,
        "hash_ok": got == size and h.hexdigest() == stream_hash(seed, size),
    }


def bench_run(scenario: BenchScenario, config: Optional[EngineConfig] = None) -> dict:
    scenario.validate()
    config = (config or EngineConfig(log_mode="off")).validate()
    kind = scenario.kind

    if kind == "single_flow_down":
        seed = 11
        rig = _BenchRig(scenario, config,
                        lambda net: net.add_tcp_file("10.50.0.1", 80, scenario.size, seed=seed))
        try:
            flow = _download_one(rig.app, "10.50.0.1", 80, scenario.size, seed)
        finally:
            stats = rig.close()
        report = rig.base_report(stats)
        report.update(flow)
        return report

    if kind == "single_flow_up":
        rig = _BenchRig(scenario, config,
                        lambda net: net.add_tcp_sink("10.50.0.2", 80))
        try:
            block = content_block(23)
            h = hashlib.sha256()
            s = rig.app.tcp_connect("10.50.0.2", 80, timeout=10.0)
            sent = 0
            t0 = time.monotonic()
            while sent < scenario.size:
                n = min(len(block), scenario.size - sent)
                chunk = block[:n] if n != len(block) else block
                s.send(chunk, timeout=120.0)
                h.update(chunk)
                sent += n
            s.shutdown_write()
            digest = s.recv_all(timeout=60.0).strip().decode()
            seconds = time.monotonic() - t0
            s.close()
        finally:
            stats = rig.close()
        report = rig.base_report(stats)
        report.update(
            bytes=sent,
            seconds=seconds,
            mbps=(sent * 8 / seconds / 1e6) if seconds > 0 else 0.0,
            hash_ok=digest == h.hexdigest(),
        )
        return report

    if kind == "multi_flow_16":
        flows = scenario.flows
        per_size = scenario.size if scenario.size != 500_000_000 else 50_000_000

        def setup(net):
            for i in range(flows):
                net.add_tcp_file("10.50.1.1", 8000 + i, per_size, seed=200 + i)

        rig = _BenchRig(scenario, config, setup)
        results: list[Optional[dict]] = [None] * flows
        try:
            def fetch(i):
                results[i] = _download_one(rig.app, "10.50.1.1", 8000 + i, per_size, 200 + i)

            threads = [threading.Thread(target=fetch, args=(i,)) for i in range(flows)]
            t0 = time.monotonic()
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            wall = time.monotonic() - t0
        finally:
            stats = rig.close()
        if any(r is None for r in results):
            raise ScenarioSetupFailure("a flow thread died")
        rates = [r["mbps"] for r in results]
        report = rig.base_report(stats)
        report.update(
            flows=flows,
            per_flow=[
                {"flow": i, **results[i]} for i in range(flows)
            ],
            mean_mbps=sum(rates) / len(rates),
            min_mbps=min(rates),
            max_mbps=max(rates),
            ratio=(max(rates) / min(rates)) if min(rates) > 0 else float("inf"),
            seconds=wall,
            aggregate_mbps=(sum(r["bytes"] for r in results) * 8 / wall / 1e6),
            all_complete=all(r["hash_ok"] for r in results),
        )
        return report

    if kind == "idle":
        rig = _BenchRig(scenario, config, lambda net: None)
        try:
            t0 = time.monotonic()
            time.sleep(scenario.seconds)
            wall = time.monotonic() - t0
        finally:
            stats = rig.close()
        report = rig.base_report(stats)
        report.update(
            seconds=wall,
            bytes_forwarded=stats["bytes_up"] + stats["bytes_down"],
        )
        return report

    # latency: handshake overhead against a zero-latency endpoint
    rig = _BenchRig(scenario, config,
                    lambda net: net.add_tcp_echo("10.50.0.3", 80))
    lat_ms: list[float] = []
    try:
        from .packet import FlowKey

        for _ in range(scenario.samples):
            s = rig.app.tcp_connect("10.50.0.3", 80, timeout=5.0)
            key = FlowKey(PROTO_TCP, APP_IP, s.local_port, "10.50.0.3", 80)
            conn = rig.engine._conns.get(key)
            if conn is not None and conn.synack_time is not None:
                lat_ms.append(connect_latency(conn))
            s.close()
    finally:
        stats = rig.close()
    if not lat_ms:
        raise ScenarioSetupFailure("no latency samples collected")
    lat_ms.sort()
    report = rig.base_report(stats)
    report.update(
        samples=len(lat_ms),
        mean_ms=sum(lat_ms) / len(lat_ms),
        p95_ms=lat_ms[min(len(lat_ms) - 1, int(len(lat_ms) * 0.95))],
        max_ms=lat_ms[-1],
    )
    return report


# -- offline commands ------------------------------------------------------


def replay_inspect(path: str, pattern_file: Optional[str] = None,
                   policy_file: Optional[str] = None) -> dict:
    """Offline DPI over a capture: inspect every outgoing payload."""
    from .net_harness import load_trace

    patterns = load_patterns(pattern_file) if pattern_file else default_patterns()
    policies = PolicyStore(policy_file) if policy_file else PolicyStore()
    ctx = DpiContext(ruleset=compile_ruleset(patterns), policies=policies)
    events = []
    ctx.listeners.append(events.append)
    packets = 0
    inspected_up = 0
    for tp in load_trace(path):
        packets += 1
        if tp.direction == "down":
            continue
        try:
            d = parse_datagram(tp.data)
        except Exception:
            continue
        inspected_up += 1
        ctx.inspect_datagram(d, now=tp.timestamp)
    return {
        "packets": packets,
        "inspected": inspected_up,
        "leaks": [e.to_json() for e in events],
        "blocked": ctx.blocked,
        "scrubbed": ctx.scrubbed,
    }


def export_features_from_capture(path: str, out_path: str,
                                 burst_gap_s: Optional[float] = None) -> dict:
    """Group captured packets into flows and emit one feature row per flow."""
    flows: dict = {}
    labels: dict = {}
    for pkt in read_capture(path):
        try:
            d = parse_datagram(pkt.data)
        except Exception:
            continue
        direction = pkt.annotations.get("direction")
        key = d.flow_key()
        if direction == "down":
            # normalize to the flow's up-direction key
            key = type(key)(key.protocol, key.dst_ip, key.dst_port,
                            key.src_ip, key.src_port)
        elif direction is None:
            direction = "up"
        dirn = Direction.UP if direction == "up" else Direction.DOWN
        flows.setdefault(key, []).append(
            record_from_datagram(d, dirn, pkt.timestamp)
        )
        if "app" in pkt.annotations:
            labels[key] = pkt.annotations["app"]
    vectors = []
    ordered = []
    for key, records in flows.items():
        kwargs = {} if burst_gap_s is None else {"burst_gap_s": burst_gap_s}
        vectors.append(extract_features(records, **kwargs))
        ordered.append(labels.get(key, UNKNOWN_APP))
    csv_text = export_features(vectors, labels=ordered)
    Path(out_path).write_text(csv_text)
    return {"flows": len(vectors), "rows": len(vectors), "output": out_path}


# -- demo traffic for `run` -----------------------------------------------


def _default_sim(net: SimNet) -> None:
    net.add_tcp_echo("203.0.113.10", 443)
    net.add_tcp_file("203.0.113.20", 80, 4 * 1024 * 1024, seed=42)
    net.add_tcp_sink("203.0.113.30", 9000)
    net.add_udp_echo("203.0.113.53", 53)


class _DemoTraffic:
    """Background load so `run --traffic` has something to show."""

    APPS = {
        "com.example.mail": ("203.0.113.10", 443),
        "com.example.browser": ("203.0.113.20", 80),
        "com.example.backup": ("203.0.113.30", 9000),
    }

    def __init__(self, service: ProxyService):
        self.service = service
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="demo-traffic", daemon=True)

    def start(self):
        self._thread.start()

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=5.0)

    def _loop(self):
        svc = self.service
        app = AppStack(svc.tun, ip=APP_IP)
        tick = 0
        try:
            while not self._stop.wait(1.0):
                tick += 1
                try:
                    if tick % 3 == 1:
                        s = app.tcp_connect(*self.APPS["com.example.mail"], timeout=3.0)
                        svc.oracle.register(APP_IP, s.local_port, "com.example.mail")
                        body = b"periodic sync " + str(tick).encode()
                        if tick % 9 == 1:
                            body += b" imei=356938035643809"
                        s.send(body)
                        s.recv(4096, timeout=3.0)
                        s.close()
                    elif tick % 3 == 2:
                        s = app.tcp_connect(*self.APPS["com.example.browser"], timeout=3.0)
                        svc.oracle.register(APP_IP, s.local_port, "com.example.browser")
                        while s.recv(1 << 20, timeout=5.0):
                            pass
                        s.close()
                    else:
                        u = app.udp_open("203.0.113.53", 53)
                        svc.oracle.register(APP_IP, u.local_port, "com.example.browser")
                        u.send(b"dns query " + str(tick).encode())
                        u.recv(timeout=2.0)
                        u.close()
                except Exception:
                    continue
        finally:
            app.close()


# -- CLI -------------------------------------------------------------------


def _add_common_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mtu", type=int, default=16384)
    p.add_argument("--dpi", action="store_true", help="inspect outgoing payloads")
    p.add_argument("--patterns", help="pattern JSON file")
    p.add_argument("--log-mode", choices=["full", "headers", "off"], default="full")
    p.add_argument("--log-dir", help="capture/event directory (env ANTPROXY_LOG_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="antproxy",
        description="user-space network monitor: layer-3 capture to layer-4 sockets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the engine and API until interrupted")
    _add_common_engine_flags(run_p)
    run_p.add_argument("--backend", choices=["sim", "os"], default="sim")
    run_p.add_argument("--tun-name", default="ant0")
    run_p.add_argument("--api", help="API bind host:port (env ANTPROXY_API_ADDR)")
    run_p.add_argument("--traffic", action="store_true",
                       help="generate background demo traffic (sim only)")

    bench_p = sub.add_parser("bench", help="run an evaluation scenario, JSON on stdout")
    bench_p.add_argument("--scenario", required=True, choices=BenchScenario.KINDS)
    bench_p.add_argument("--size", type=int, default=500_000_000)
    bench_p.add_argument("--seconds", type=float, default=120.0)
    bench_p.add_argument("--flows", type=int, default=16)
    bench_p.add_argument("--samples", type=int, default=50)
    bench_p.add_argument("--dpi", action="store_true")
    bench_p.add_argument("--log", action="store_true")
    bench_p.add_argument("--log-dir")
    bench_p.add_argument("--mtu", type=int, default=16384)

    replay_p = sub.add_parser("replay", help="offline DPI over a capture file")
    replay_p.add_argument("file")
    replay_p.add_argument("--patterns")
    replay_p.add_argument("--policies", help="policy JSONL to apply")

    exp_p = sub.add_parser("export-features", help="per-flow feature vectors from a capture")
    exp_p.add_argument("file")
    exp_p.add_argument("-o", "--output", default="features.csv")
    exp_p.add_argument("--burst-gap", type=float, default=None)

    val_p = sub.add_parser("validate-capture", help="structural check of a pcapng file")
    val_p.add_argument("file")

    return parser


def cmd_run(args) -> int:
    config = EngineConfig(
        mtu=args.mtu,
        backend=args.backend,
        log_mode=args.log_mode,
        log_dir=args.log_dir,
        dpi=args.dpi,
        pattern_file=args.patterns,
        api_addr=args.api,
        tun_name=args.tun_name,
    )
    sim_setup = _default_sim if args.backend == "sim" else None
    service = ProxyService(config, sim_setup=sim_setup)

    stop = threading.Event()

    def _sig(_signo, _frame):
        stop.set()

    # handlers must be live before the readiness line goes out
    signal.signal(signal.SIGINT, _sig)
    signal.signal(signal.SIGTERM, _sig)

    service.start()
    host, port = service.serve_api()
    print(f"antproxy: engine up, api at http://{host}:{port}", file=sys.stderr)

    demo = None
    if args.traffic and args.backend == "sim":
        demo = _DemoTraffic(service)
        demo.start()
    try:
        while not stop.wait(0.5):
            pass
    finally:
        if demo is not None:
            demo.stop()
        service.stop()
    return 0


def cmd_bench(args) -> int:
    scenario = BenchScenario(
        kind=args.scenario,
        size=args.size,
        dpi=args.dpi,
        log=args.log,
        seconds=args.seconds,
        flows=args.flows,
        samples=args.samples,
    )
    config = EngineConfig(mtu=args.mtu, log_mode="off", log_dir=args.log_dir)
    report = bench_run(scenario, config)
    print(json.dumps(report, indent=2))
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "bench":
            return cmd_bench(args)
        if args.command == "replay":
            report = replay_inspect(args.file, args.patterns, args.policies)
            print(json.dumps(report, indent=2))
            return 0
        if args.command == "export-features":
            report = export_features_from_capture(
                args.file, args.output, burst_gap_s=args.burst_gap
            )
            print(json.dumps(report, indent=2))
            return 0
        if args.command == "validate-capture":
            summary = validate_capture(args.file)
            print(json.dumps({
                "ok": summary.ok,
                "blocks": summary.blocks,
                "packets": summary.packets,
                "bytes_captured": summary.bytes_captured,
                "errors": summary.errors,
            }, indent=2))
            return 0 if summary.ok else 1
    except (ControlError, OSError) as e:
        print(f"antproxy: {e}", file=sys.stderr)
        return 1
    parser.error("unreachable")
    return 2


if __name__ == "__main__":
    sys.exit(main())

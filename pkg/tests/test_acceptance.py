"""Release acceptance suite: one test per criterion, one verdict line each.

A full run prints a checklist of [PASS]/[FAIL] lines with the measured
numbers, so the release decision is readable straight off the pytest
output.  These are end-to-end measurements rather than unit tests; the
throughput ones move real gigabytes through the engine and the whole
file takes a few minutes on one core.

Reference implementations (brute-force scanner, O(n^2) throughput,
feature recomputation) are imported from the unit-test modules so each
oracle exists exactly once.  Timing checks compare runs interleaved
within the same process because wall-clock CPU speed here drifts
between seconds; an absolute number measured in one block and a second
number measured a minute later are not comparable.
"""

import hashlib
import os
import random
import shutil
import statistics
import tempfile
import threading
import time

import pytest

from antproxy.appstack import AppStack
from antproxy.capture_log import (
    CaptureWriter,
    LogMode,
    LogPolicy,
    StorageSink,
    read_capture,
    validate_capture,
)
from antproxy.control import BenchScenario, EngineConfig, ProxyService, bench_run
from antproxy.dpi import (
    Action,
    DpiContext,
    Pattern,
    PolicyStore,
    apply_policy,
    compile_ruleset,
    default_patterns,
)
from antproxy.net_harness import stream_hash
from antproxy.packet import (
    PROTO_TCP,
    PROTO_UDP,
    TcpFlags,
    parse_datagram,
    serialize_datagram,
    tcp_datagram,
)
from antproxy.telemetry import (
    FEATURE_NAMES,
    Direction,
    export_features,
    extract_features,
    max_windowed_throughput,
    parse_features_csv,
)

from test_control import api_get, api_send
from test_dpi import naive_scan
from test_forwarder import APP_IP, rig, wait_until
from test_telemetry import naive_features, naive_max_throughput, random_flow, random_trace

FULL_SIZE = 500_000_000
PAIR_SIZE = 150_000_000


@pytest.fixture
def verdict(capsys):
    """Prints the one checklist line for a criterion, then asserts it."""

    def emit(ok, name, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return emit


def _bench(kind, tmp, **kw):
    cfg = EngineConfig(log_dir=str(tmp))
    return bench_run(BenchScenario(kind=kind, **kw), cfg)


# Defined (and therefore run) before the 500 MB tests: the overhead ratios
# are the measurement most sensitive to page-cache and writeback state, so
# they get the machine while it is still quiet.
def test_03_dpi_and_logging_overhead(tmp_path, verdict):
    def upload(dpi, log):
        # fresh dir per run, removed right after: capture files this size
        # otherwise pile up in the page cache and later runs pay reclaim
        # stalls inside their timed window
        d = tempfile.mkdtemp(dir=tmp_path)
        r = _bench("single_flow_up", d, size=PAIR_SIZE, dpi=dpi, log=log)
        shutil.rmtree(d, ignore_errors=True)
        os.sync()
        assert r["hash_ok"]
        return r["mbps"]

    upload(dpi=False, log=False)  # warmup discarded
    # single runs on this host swing up to 2x, so each configuration gets a
    # block of runs and the verdicts compare block medians: an outlier run
    # cannot set the verdict, and the shared dpi block anchors both.  The
    # logging delta gets the larger blocks because its limit is the tighter
    # one relative to the host noise.
    base_runs = [upload(dpi=False, log=False) for _ in range(5)]
    dpi_runs = [upload(dpi=True, log=False) for _ in range(7)]
    log_runs = [upload(dpi=True, log=True) for _ in range(7)]

    dpi_ratio = statistics.median(dpi_runs) / statistics.median(base_runs)
    log_delta = abs(
        statistics.median(log_runs) / statistics.median(dpi_runs) - 1.0
    )
    ok = dpi_ratio >= 0.60 and log_delta < 0.15
    verdict(
        ok,
        "dpi-logging-overhead",
        f"upload with dpi at {dpi_ratio:.2f}x the no-dpi rate (floor 0.60x); "
        f"logging shifts throughput {log_delta:.1%} (limit 15%)",
    )


def test_01_byte_fidelity(tmp_path, verdict):
    down = _bench("single_flow_down", tmp_path, size=FULL_SIZE)
    up = _bench("single_flow_up", tmp_path, size=FULL_SIZE)
    ok = (
        down["hash_ok"]
        and up["hash_ok"]
        and down["seconds"] < 120.0
        and up["seconds"] < 120.0
    )
    verdict(
        ok,
        "byte-fidelity",
        f"500 MB down sha-ok={down['hash_ok']} in {down['seconds']:.1f}s, "
        f"500 MB up sha-ok={up['hash_ok']} in {up['seconds']:.1f}s (budget 120 s each)",
    )


def test_02_throughput_floor(tmp_path, verdict):
    down = _bench("single_flow_down", tmp_path, size=FULL_SIZE, dpi=True, log=True)
    up = _bench("single_flow_up", tmp_path, size=FULL_SIZE, dpi=True, log=True)
    # ~1 GB of capture files; drop them before the overhead test runs
    shutil.rmtree(tmp_path, ignore_errors=True)
    os.sync()
    ok = (
        down["hash_ok"]
        and up["hash_ok"]
        and down["mbps"] >= 90.0
        and up["mbps"] >= 65.0
    )
    verdict(
        ok,
        "throughput-floor",
        f"dpi+logging on: down {down['mbps']:.0f} Mbps (floor 90), "
        f"up {up['mbps']:.0f} Mbps (floor 65)",
    )


def test_04_resource_budgets(verdict):
    def setup(net):
        net.add_tcp_echo("198.51.100.1", 7)
        net.add_udp_echo("198.51.100.2", 53)

    with rig(setup) as r:
        s = r.app.tcp_connect("198.51.100.1", 7, timeout=10.0)
        s.send(b"x")
        assert s.recv(10, timeout=5.0) == b"x"
        workers_one = r.engine.stats()["workers"]
        s.close()

        socks = [r.app.tcp_connect("198.51.100.1", 7, timeout=30.0) for _ in range(200)]
        stats = r.engine.stats()
        workers_many = stats["workers"]
        active = stats["flows_active"]
        for s in socks:
            s.close()

        for _ in range(5):
            u = r.app.udp_open("198.51.100.2", 53)
            u.send(b"ping")
            assert u.recv(timeout=5.0) == b"ping"
            u.close()
        udp_socks = r.engine.stats()["udp_socket_count"]

        failures = [0] * 25

        def churn(slot):
            for _ in range(200):
                try:
                    c = r.app.tcp_connect("198.51.100.1", 7, timeout=30.0)
                    c.close()
                except Exception:
                    failures[slot] += 1

        threads = [threading.Thread(target=churn, args=(i,)) for i in range(25)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        stats = r.engine.stats()

    failed = sum(failures)
    ok = (
        workers_one == 2
        and workers_many == 2
        and active >= 200
        and udp_socks == 1
        and failed == 0
        and stats["fd_peak"] < 1024
    )
    verdict(
        ok,
        "resource-budgets",
        f"workers {workers_one}/{workers_many} at 1/200 flows (want 2), "
        f"udp sockets {udp_socks} (want 1), fd peak {stats['fd_peak']} after "
        f"{5000 - failed}/5000 churn connects (limit 1024)",
    )


def test_05_multi_flow(tmp_path, verdict):
    r = _bench("multi_flow_16", tmp_path)  # 16 x 50 MB concurrent downloads
    ok = r["flows"] == 16 and r["all_complete"] and r["ratio"] <= 3.0
    verdict(
        ok,
        "multi-flow",
        f"16x50 MB complete={r['all_complete']}, per-flow mean {r['mean_mbps']:.0f} Mbps, "
        f"max/min ratio {r['ratio']:.2f} (limit 3)",
    )


LETTERS = bytes(range(97, 123))


def _random_instance(rng, big):
    """Patterns and a text with planted occurrences, bounds 100 x 1 MB.

    Small instances get tiny alphabets and 1-byte patterns so overlap and
    restart behaviour is hammered; big ones keep patterns >= 4 bytes so the
    brute-force side stays tractable.
    """
    if big:
        n = rng.randint(1 << 16, 1 << 20)
        alphabet = LETTERS[: rng.choice((4, 8, 26))]
        npat = rng.randint(20, 100)
        min_len = 4
    else:
        n = rng.randint(0, 4096)
        k = rng.choice((2, 3, 4, 8, 26, 256))
        alphabet = LETTERS[:k] if k <= 26 else bytes(range(256))
        npat = rng.randint(1, 40)
        min_len = 1
    pats = []
    for i in range(npat):
        if pats and rng.random() < 0.05:
            data = pats[rng.randrange(len(pats))].data  # duplicate body, new id
        else:
            plen = min_len + rng.choice((0, 1, 3, 7, 15))
            data = bytes(rng.choices(alphabet, k=plen))
        pats.append(Pattern(f"p{i}", data, "t"))
    text = bytearray(rng.choices(alphabet, k=n))
    for _ in range(min(n, 32)):
        p = rng.choice(pats).data
        if len(p) <= n:
            off = rng.randint(0, n - len(p))
            text[off : off + len(p)] = p
    first, last = pats[0].data, pats[-1].data
    if len(first) <= n:
        text[: len(first)] = first  # match at offset 0
    if len(last) <= n:
        text[n - len(last) :] = last  # match ending on the final byte
    return bytes(text), pats


def test_06_matcher_oracle(verdict):
    rng = random.Random(0xAC0)
    mismatches = 0
    for i in range(1000):
        big = i in (0, 333, 666, 999)
        if i == 0:
            # pin one instance to the exact bounds
            text, pats = _random_instance(rng, big=True)
            pad = bytes(rng.choices(LETTERS[:8], k=(1 << 20) - len(text)))
            text += pad
            while len(pats) < 100:
                pats.append(Pattern(f"p{len(pats)}", bytes(rng.choices(LETTERS[:8], k=6)), "t"))
        else:
            text, pats = _random_instance(rng, big)
        rs = compile_ruleset(pats)
        if set(rs.inspect(text)) != naive_scan(text, pats):
            mismatches += 1

    pats = [
        Pattern(f"t{i}", bytes(rng.choices(LETTERS, k=rng.randint(6, 16))), "bench")
        for i in range(100)
    ]
    rs = compile_ruleset(pats)
    pkt = bytearray(rng.choices(LETTERS, k=16384))
    pkt[: len(pats[0].data)] = pats[0].data
    pkt[-len(pats[-1].data) :] = pats[-1].data
    pkt = bytes(pkt)
    best = min(_timed(rs.inspect, pkt) for _ in range(30))
    assert rs.inspect(pkt)  # the timed packet does contain matches

    ok = mismatches == 0 and best < 0.010
    verdict(
        ok,
        "matcher-oracle",
        f"1000 randomized instances, {mismatches} mismatches vs brute force; "
        f"16 KB / 100-pattern inspect {best * 1e6:.0f} us (limit 10 ms)",
    )


def _timed(fn, arg):
    t0 = time.perf_counter()
    fn(arg)
    return time.perf_counter() - t0


def _leaky_payload(rng, patterns):
    filler = b"QWERTYUIOPASDFGHJKLZXCVBNM-_ "
    parts = []
    if rng.random() < 0.3:
        parts.append(rng.choice(patterns).data)  # leak at offset 0
    for _ in range(rng.randint(1, 3)):
        parts.append(bytes(rng.choices(filler, k=rng.randint(0, 120))))
        parts.append(rng.choice(patterns).data)
    if rng.random() < 0.7:
        parts.append(bytes(rng.choices(filler, k=rng.randint(1, 120))))
    return b"".join(parts)


def test_07_scrub_and_block(verdict):
    patterns = default_patterns()
    rs = compile_ruleset(patterns)
    rng = random.Random(7)

    for _ in range(250):
        payload = _leaky_payload(rng, patterns)
        d = tcp_datagram(
            src_ip=APP_IP, src_port=40000, dst_ip="198.51.100.9", dst_port=443,
            seq=4321, ack=99, flags=TcpFlags.ACK | TcpFlags.PSH, payload=payload,
        )
        matches = rs.inspect(payload)
        assert matches
        res = apply_policy(d, matches, PolicyStore(), rs, app_id="app")
        assert res.verdict == "forward"
        scrubbed = res.datagram.payload
        assert len(scrubbed) == len(payload)
        assert not rs.inspect(scrubbed)
        # parse re-verifies both checksums and the header lengths
        back = parse_datagram(serialize_datagram(res.datagram))
        assert back.payload == scrubbed
        assert back.transport.seq == 4321 and back.transport.dst_port == 443

    store = PolicyStore()
    store.set("app", patterns[0].pattern_id, Action.BLOCK)
    leak = b"x" + patterns[0].data + b"y"
    d = tcp_datagram(
        src_ip=APP_IP, src_port=40000, dst_ip="198.51.100.9", dst_port=443,
        seq=1, ack=1, flags=TcpFlags.ACK, payload=leak,
    )
    res = apply_policy(d, rs.inspect(leak), store, rs, app_id="app")
    assert res.verdict == "drop" and res.datagram is None

    # end to end: an echo server returns exactly what the engine forwarded
    ctx = DpiContext(ruleset=rs, policies=PolicyStore())
    with rig(lambda net: net.add_tcp_echo("198.51.100.9", 443), dpi=ctx) as r:
        s = r.app.tcp_connect("198.51.100.9", 443, timeout=10.0)
        msg = b"to=user@example.com subject=hi"
        s.send(msg)
        echoed = b""
        while len(echoed) < len(msg):
            echoed += s.recv(1024, timeout=5.0)
        far_side_clean = (
            len(echoed) == len(msg)
            and b"user@example.com" not in echoed
            and echoed != msg
        )
        s.close()

    blocking = PolicyStore()
    blocking.set("unknown", "imei", Action.BLOCK)
    ctx2 = DpiContext(ruleset=rs, policies=blocking)
    eps = {}

    def setup(net):
        eps["sink"] = net.add_tcp_sink("198.51.100.9", 443)

    with rig(setup, dpi=ctx2) as r:
        s = r.app.tcp_connect("198.51.100.9", 443, timeout=10.0)
        s.send(b"id imei=356938035643809 end")
        assert wait_until(lambda: ctx2.blocked >= 1)
        s.send(b"still alive")  # app leg must survive the block
        s.shutdown_write()
        # the sink answers with a digest of everything it received, so this
        # proves the clean bytes arrived and the blocked ones did not
        reply = s.recv_all(timeout=10.0).strip().decode()
        liveness = (
            not s.reset
            and reply == hashlib.sha256(b"still alive").hexdigest()
            and eps["sink"].bytes_in == len(b"still alive")
        )
        s.close()

    ok = far_side_clean and liveness
    verdict(
        ok,
        "scrub-and-block",
        "250 randomized scrubs keep length+checksums and leave no pattern; "
        f"echo returned scrubbed bytes (clean={far_side_clean}); blocked send "
        f"dropped with connection alive ({liveness})",
    )


def test_08_capture_fidelity(tmp_path, verdict):
    cap = tmp_path / "full.pcapng"
    writer = CaptureWriter(cap, policy=LogPolicy(mode=LogMode.FULL_PACKET))
    sink = StorageSink(writer=writer)
    sink.start()
    eps = {}

    def setup(net):
        net.add_tcp_file("198.51.100.5", 80, 3_000_000, seed=99)
        eps["sink"] = net.add_tcp_sink("198.51.100.6", 9000)
        net.add_udp_echo("198.51.100.7", 53)

    up_data = random.Random(5).randbytes(2_000_000)
    udp_sent = [b"alpha", b"bravo", b"charlie-delta"]
    with rig(setup, sink=sink) as r:
        s = r.app.tcp_connect("198.51.100.5", 80, timeout=10.0)
        down_data = s.recv_all(timeout=60.0)
        s.close()

        s = r.app.tcp_connect("198.51.100.6", 9000, timeout=10.0)
        s.send(up_data, timeout=60.0)
        s.shutdown_write()
        digest_reply = s.recv_all(timeout=30.0)
        s.close()

        u = r.app.udp_open("198.51.100.7", 53)
        udp_back = []
        for m in udp_sent:
            u.send(m)
            udp_back.append(u.recv(timeout=5.0))
        u.close()
        assert wait_until(lambda: not sink._q)
        stats = r.engine.stats()
    sink.stop()
    writer.close()

    summary = validate_capture(cap)
    pkts = read_capture(cap)
    directions_ok = all(p.annotations.get("direction") in ("up", "down") for p in pkts)

    up_tcp, down_tcp = {}, {}
    udp_up, udp_down = [], []
    up_total = down_total = 0
    for p in pkts:
        d = parse_datagram(p.data)  # raises on any bad stored checksum
        direction = p.annotations["direction"]
        if direction == "up":
            up_total += len(d.payload)
        else:
            down_total += len(d.payload)
        if not d.payload:
            continue
        if d.ip.protocol == PROTO_TCP:
            if direction == "up":
                up_tcp.setdefault(d.transport.dst_port, []).append(d.payload)
            else:
                down_tcp.setdefault(d.transport.src_port, []).append(d.payload)
        elif d.ip.protocol == PROTO_UDP:
            (udp_up if direction == "up" else udp_down).append(d.payload)

    cap_up = b"".join(up_tcp.get(9000, []))
    cap_down_file = b"".join(down_tcp.get(80, []))
    cap_down_reply = b"".join(down_tcp.get(9000, []))
    ok = (
        summary.ok
        and directions_ok
        and sink.dropped == 0
        and not any(stats["drops"].values())
        and cap_up == up_data
        and cap_down_file == down_data
        and hashlib.sha256(down_data).hexdigest() == stream_hash(99, 3_000_000)
        and cap_down_reply == digest_reply
        and udp_up == udp_sent
        and udp_down == udp_back
        and up_total == stats["bytes_up"]
        and down_total == stats["bytes_down"]
    )
    verdict(
        ok,
        "capture-fidelity",
        f"validator ok={summary.ok} over {summary.packets} packets; every packet "
        f"annotated with a direction; captured payload bytes equal forwarded bytes "
        f"({up_total} up / {down_total} down, 0 dropped log events)",
    )


def test_09_telemetry(verdict):
    rng = random.Random(0x7E1)
    worst = 0.0
    ordering_ok = True
    for _ in range(100):
        trace = random_trace(rng, n=rng.randint(0, 250), span=rng.uniform(0.5, 30.0))
        for direction in (Direction.UP, Direction.DOWN):
            per_w = {}
            for w in (1.0, 5.0):
                got = max_windowed_throughput(trace, w, direction)
                want = naive_max_throughput(trace, w, direction)
                err = abs(got - want) / want if want else abs(got - want)
                worst = max(worst, err)
                per_w[w] = got
            if per_w[1.0] < per_w[5.0] - 1e-9 * max(1.0, per_w[5.0]):
                ordering_ok = False

    # identical workloads, with and without a telemetry consumer attached;
    # the far endpoint's byte counters must not move by a single byte
    runs = []
    for attach in (False, True):
        events = []
        sink = StorageSink(telemetry_cb=(events.append if attach else None))
        sink.start()
        eps = {}

        def setup(net):
            eps["echo"] = net.add_tcp_echo("198.51.100.7", 7)

        with rig(setup, sink=sink) as r:
            s = r.app.tcp_connect("198.51.100.7", 7, timeout=10.0)
            for _ in range(50):
                s.send(b"m" * 1000)
                got = 0
                while got < 1000:
                    got += len(s.recv(2000, timeout=5.0))
            s.close()
            assert wait_until(lambda: not sink._q)
            stats = r.engine.stats()
        sink.stop()
        runs.append(
            (eps["echo"].bytes_in, eps["echo"].bytes_out,
             stats["bytes_up"], stats["bytes_down"], len(events))
        )
    same_wire = runs[0][:4] == runs[1][:4]
    consumer_fed = runs[1][4] > 0 and runs[0][4] == 0

    ok = worst < 1e-9 and ordering_ok and same_wire and consumer_fed
    verdict(
        ok,
        "telemetry",
        f"windowed max equals brute force on 100 traces (worst rel err {worst:.2e}); "
        f"W=1 >= W=5 on every trace ({ordering_ok}); wire counters identical with "
        f"telemetry on ({same_wire}, {runs[1][4]} events observed passively)",
    )


def test_10_flow_features(tmp_path, verdict):
    rng = random.Random(0xFEA7)
    mismatches = 0
    invariants_ok = True
    vectors, labels = [], []
    for i in range(1000):
        pkts = random_flow(rng)
        vec = extract_features(pkts)
        want = naive_features(pkts)
        assert list(vec) == list(FEATURE_NAMES)
        for name in FEATURE_NAMES:
            if vec[name] != pytest.approx(want[name], rel=1e-9, abs=1e-12):
                mismatches += 1
                break
        for prefix in ("up", "down"):
            for stem in ("pkt_size", "payload_size", "interarrival"):
                lo = vec[f"{prefix}_{stem}_min"]
                mid = vec[f"{prefix}_{stem}_mean"]
                hi = vec[f"{prefix}_{stem}_max"]
                if not (lo <= mid + 1e-12 and mid <= hi + 1e-12):
                    invariants_ok = False
        if min(vec.values()) < -1e-12:
            invariants_ok = False
        if i < 200:
            vectors.append(vec)
            labels.append(f"app{i % 7}")

    text = export_features(vectors, labels)
    back, labels_back = parse_features_csv(text)
    round_trip = labels_back == labels and all(
        back[j][name] == pytest.approx(vectors[j][name], rel=1e-8, abs=1e-8)
        for j in range(len(vectors))
        for name in FEATURE_NAMES
    )

    ok = mismatches == 0 and invariants_ok and round_trip
    verdict(
        ok,
        "flow-features",
        f"1000 random flows, {mismatches} vectors differ from recomputation; "
        f"stat-triple ordering and nonnegativity hold ({invariants_ok}); "
        f"200-row csv round-trip at 9 significant digits ({round_trip})",
    )


def test_11_handshake_latency(tmp_path, verdict):
    r = _bench("latency", tmp_path, samples=50)
    ok = r["samples"] >= 50 and r["mean_ms"] < 5.0
    verdict(
        ok,
        "handshake-latency",
        f"syn->synack overhead mean {r['mean_ms']:.2f} ms, p95 {r['p95_ms']:.2f} ms "
        f"over {r['samples']} connects (limit 5 ms mean)",
    )


def test_12_policy_switch(tmp_path, verdict):
    eps = {}

    def setup(net):
        eps["sink"] = net.add_tcp_sink("203.0.113.30", 9000)

    svc = ProxyService(
        EngineConfig(dpi=True, log_mode="off", log_dir=str(tmp_path),
                     api_addr="127.0.0.1:0"),
        sim_setup=setup,
    )
    svc.start()
    _, port = svc.serve_api()
    leak = b"report imei=356938035643809 end"
    try:
        app = AppStack(svc.tun, ip=APP_IP)
        t_before = time.time()
        s = app.tcp_connect("203.0.113.30", 9000, timeout=10.0)
        s.send(leak)
        assert wait_until(lambda: svc.dpi_ctx.scrubbed >= 1)
        s.shutdown_write()
        first_reply = s.recv_all(timeout=10.0).strip().decode()
        # same length delivered, content scrubbed
        scrub_delivered = (
            eps["sink"].bytes_in == len(leak)
            and first_reply != hashlib.sha256(leak).hexdigest()
        )
        pre_scrubbed, pre_blocked = svc.dpi_ctx.scrubbed, svc.dpi_ctx.blocked

        status, body = api_send(
            port, "/policy",
            {"app_id": "unknown", "pattern_id": "imei", "action": "block"},
        )
        acked = status == 200 and body.get("ok") is True

        # replay the same leak on a fresh flow, strictly after the ack
        s2 = app.tcp_connect("203.0.113.30", 9000, timeout=10.0)
        for _ in range(3):
            s2.send(leak)
        assert wait_until(lambda: svc.dpi_ctx.blocked - pre_blocked >= 3)
        blocked_delta = svc.dpi_ctx.blocked - pre_blocked
        scrubbed_delta = svc.dpi_ctx.scrubbed - pre_scrubbed

        s2.send(b"clean")  # flow still usable, clean bytes still pass
        s2.shutdown_write()
        second_reply = s2.recv_all(timeout=10.0).strip().decode()
        clean_only = (
            second_reply == hashlib.sha256(b"clean").hexdigest()
            and eps["sink"].bytes_in == len(leak) + 5
        )

        _, leaks = api_get(port, f"/leaks?since={t_before}")
        actions = [e["action"] for e in leaks["leaks"] if e["pattern_id"] == "imei"]
        post_actions = set(actions[1:])  # first event predates the switch

        s.close()
        s2.close()
        app.close()
    finally:
        svc.stop()

    ok = (
        acked
        and scrub_delivered
        and blocked_delta == 3
        and scrubbed_delta == 0
        and clean_only
        and post_actions == {"BLOCK"}
    )
    verdict(
        ok,
        "policy-switch",
        f"before: leak scrubbed and delivered ({scrub_delivered}); after /policy "
        f"ack: 3 replayed leaks -> {blocked_delta} blocked, {scrubbed_delta} "
        f"scrubbed, far side saw only the clean bytes ({clean_only}); leak log "
        f"shows only BLOCK after the switch ({sorted(post_actions)})",
    )

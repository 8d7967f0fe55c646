"""Multi-pattern payload inspection with per-(app, pattern) leak policies.

The matcher is an Aho-Corasick automaton over raw bytes: a goto trie,
failure links computed by BFS, and output lists propagated along the
failure chain.  For rulesets of moderate size the automaton is also
flattened into a dense per-state transition row (a full DFA), which
keeps the scan loop to two list indexes per byte.  When the set of
bytes that can leave the root state is small, runs of uninteresting
bytes are skipped with a compiled character-class search; the automaton
provably stays in the root state across such runs, so this is a pure
acceleration, not an approximation.

``inspect`` reads the packet buffer in place (bytes, bytearray, or
memoryview) in a single pass; it never copies or re-encodes it.

Policies map (app_id, pattern_id) to ALLOW / BLOCK / SCRUB / ASK.  The
default for an unseen pair is ASK: scrub the occurrence now and emit an
event flagged ``needs_decision`` so an operator can choose a permanent
action.  Replacements are length-preserving so packet framing and
sequence arithmetic are untouched.
"""

from __future__ import annotations

import base64
import bisect
import dataclasses
import json
import random
import re
import string
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .packet import Datagram, FlowKey, serialize_datagram

# Above this many states the dense DFA would be tens of MB; fall back to
# the sparse goto/fail walk.
_DENSE_STATE_LIMIT = 8192
# Root-run skipping pays off only when few bytes can leave the root.
_SKIP_CLASS_LIMIT = 48

_SCRUB_ALPHABET = (string.ascii_letters + string.digits).encode()


class DpiError(ValueError):
    pass


class EmptyPattern(DpiError):
    pass


class DuplicatePatternId(DpiError):
    pass


class Action(str, Enum):
    ALLOW = "ALLOW"
    BLOCK = "BLOCK"
    SCRUB = "SCRUB"
    ASK = "ASK"


@dataclass(frozen=True)
class Pattern:
    pattern_id: str
    data: bytes
    label: str


@dataclass
class LeakEvent:
    timestamp: float
    app_id: str
    flow: str
    pattern_id: str
    label: str
    offset: int
    action: Action
    needs_decision: bool = False

    def to_json(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "app_id": self.app_id,
            "flow": self.flow,
            "pattern_id": self.pattern_id,
            "label": self.label,
            "offset": self.offset,
            "action": self.action.value,
            "needs_decision": self.needs_decision,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LeakEvent":
        return cls(
            timestamp=obj["timestamp"],
            app_id=obj["app_id"],
            flow=obj["flow"],
            pattern_id=obj["pattern_id"],
            label=obj["label"],
            offset=obj["offset"],
            action=Action(obj["action"]),
            needs_decision=obj.get("needs_decision", False),
        )


class DpiRuleset:
    """Compiled pattern set.  Immutable; rebuild after any mutation."""

    def __init__(self, patterns: list[Pattern]):
        self.patterns = list(patterns)
        self.by_id = {p.pattern_id: p for p in self.patterns}
        self._compile()

    def _compile(self) -> None:
        goto: list[dict[int, int]] = [{}]
        fail: list[int] = [0]
        out: list[tuple] = [()]
        for idx, pat in enumerate(self.patterns):
            s = 0
            for b in pat.data:
                nxt = goto[s].get(b)
                if nxt is None:
                    goto.append({})
                    fail.append(0)
                    out.append(())
                    nxt = len(goto) - 1
                    goto[s][b] = nxt
                s = nxt
            out[s] = out[s] + ((idx, len(pat.data)),)

        # BFS failure links; outputs accumulate along the failure chain so a
        # state reports every pattern ending at its position, including
        # patterns that are proper suffixes of longer ones.
        queue: deque[int] = deque()
        for s in goto[0].values():
            fail[s] = 0
            queue.append(s)
        while queue:
            r = queue.popleft()
            for b, s in goto[r].items():
                queue.append(s)
                f = fail[r]
                while f and b not in goto[f]:
                    f = fail[f]
                target = goto[f].get(b, 0)
                fail[s] = target if target != s else 0
                out[s] = out[s] + out[fail[s]]

        self._goto = goto
        self._fail = fail
        self._out = out

        self._dense: list[list[int]] | None = None
        self._root_skip: re.Pattern | None = None
        self._tr_table = None
        if len(goto) <= _DENSE_STATE_LIMIT:
            dense = [[0] * 256 for _ in range(len(goto))]
            row0 = dense[0]
            for b, s in goto[0].items():
                row0[b] = s
            order: deque[int] = deque(goto[0].values())
            while order:
                s = order.popleft()
                row = dense[s]
                frow = dense[fail[s]]
                for b in range(256):
                    nxt = goto[s].get(b)
                    row[b] = nxt if nxt is not None else frow[b]
                order.extend(goto[s].values())
            self._dense = dense

            root_bytes = sorted(goto[0])
            if len(root_bytes) <= _SKIP_CLASS_LIMIT:
                self._root_skip = re.compile(
                    b"[" + re.escape(bytes(root_bytes)) + b"]"
                )

            # Vector scan support: find every position whose byte leaves the
            # root, then discard candidates whose two-byte prefix already
            # falls back to the root with nothing to report.  Dense rows
            # subsume root transitions (delta[s][b] covers at least what
            # delta[root][b] starts), so a discarded candidate cannot hide a
            # neighboring one; survivors are verified by the real DFA walk.
            # Candidate discovery runs through bytes.translate: root-exit
            # bytes map to themselves, the rest to a sentinel byte, which is
            # far cheaper than an elementwise table gather.
            if len(goto[0]) >= 256:
                self._tr_table = None  # every byte leaves root; nothing to skip
            else:
                # map each root-exit byte to a compact id, the rest to 0
                ids = {b: k + 1 for k, b in enumerate(sorted(goto[0]))}
                self._tr_table = bytes(ids.get(b, 0) for b in range(256))
                # cont[id*256 + next] answers: starting a walk at a byte with
                # this id, can anything match?  True when the first state
                # already reports a pattern or the second byte keeps the
                # automaton out of the root.
                cont = np.zeros((len(ids) + 1) * 256, dtype=bool)
                for b, k in ids.items():
                    s1 = dense[0][b]
                    row = dense[s1]
                    base = k * 256
                    if out[s1]:
                        cont[base : base + 256] = True
                    else:
                        for c in range(256):
                            if row[c] != 0:
                                cont[base + c] = True
                self._cont = cont

    def inspect(self, payload) -> list[tuple[str, int]]:
        """All pattern occurrences in `payload` as (pattern_id, offset).

        Overlapping and nested occurrences are all reported, in order of
        match end position.  The buffer is read directly; no copies.
        """
        matches: list[tuple[str, int]] = []
        if not self.patterns or len(payload) == 0:
            return matches
        patterns = self.patterns
        out = self._out
        dense = self._dense
        if dense is not None and self._tr_table is not None and len(payload) >= 256:
            return self._inspect_vector(payload)
        if dense is not None:
            skip = self._root_skip
            s = 0
            if skip is None:
                for i, b in enumerate(payload):
                    s = dense[s][b]
                    if out[s]:
                        for pidx, plen in out[s]:
                            matches.append((patterns[pidx].pattern_id, i - plen + 1))
            else:
                i = 0
                n = len(payload)
                while i < n:
                    if s == 0:
                        m = skip.search(payload, i)
                        if m is None:
                            break
                        i = m.start()
                    s = dense[s][payload[i]]
                    if out[s]:
                        for pidx, plen in out[s]:
                            matches.append((patterns[pidx].pattern_id, i - plen + 1))
                    i += 1
            return matches

        goto = self._goto
        fail = self._fail
        s = 0
        for i, b in enumerate(payload):
            while s and b not in goto[s]:
                s = fail[s]
            s = goto[s].get(b, 0)
            if out[s]:
                for pidx, plen in out[s]:
                    matches.append((patterns[pidx].pattern_id, i - plen + 1))
        return matches

    def _inspect_vector(self, payload) -> list[tuple[str, int]]:
        matches: list[tuple[str, int]] = []
        pb = payload if isinstance(payload, (bytes, bytearray)) else bytes(payload)
        # root-exit bytes translate to their compact id, the rest to 0
        ta = np.frombuffer(pb.translate(self._tr_table), dtype=np.uint8)
        n = ta.size
        # nonzero on a bool array hits a fast path; on uint8 it is ~6x slower
        cand = np.flatnonzero(ta != 0)
        if cand.size == 0:
            return matches
        last_is_cand = cand[-1] == n - 1
        ci = cand[:-1] if last_is_cand else cand
        arr = np.frombuffer(pb, dtype=np.uint8)
        idx = ta[ci].astype(np.int32) * 256 + arr[ci + 1]
        survivors = ci[self._cont[idx]].tolist()
        if last_is_cand:
            # final byte: no pair to check, walk it unconditionally
            survivors.append(int(cand[-1]))
        if not survivors:
            return matches
        dense = self._dense
        out = self._out
        patterns = self.patterns
        k = 0
        total = len(survivors)
        while k < total:
            i = survivors[k]
            s = 0
            j = i
            while j < n:
                s = dense[s][pb[j]]
                if out[s]:
                    for pidx, plen in out[s]:
                        matches.append((patterns[pidx].pattern_id, j - plen + 1))
                j += 1
                if s == 0:
                    break
            # the walk covered [i, j); skip survivors inside it
            k = bisect.bisect_left(survivors, j, k + 1)
        return matches

    def state_count(self) -> int:
        return len(self._goto)


def compile_ruleset(patterns: list[Pattern] | list[tuple]) -> DpiRuleset:
    """Build an automaton from Pattern objects or (id, bytes, label) tuples."""
    norm: list[Pattern] = []
    seen: set[str] = set()
    for p in patterns:
        if not isinstance(p, Pattern):
            p = Pattern(pattern_id=str(p[0]), data=bytes(p[1]), label=str(p[2]))
        if len(p.data) == 0:
            raise EmptyPattern(f"pattern {p.pattern_id!r} is empty")
        if len(p.data) > 1024:
            raise DpiError(f"pattern {p.pattern_id!r} exceeds 1024 bytes")
        if p.pattern_id in seen:
            raise DuplicatePatternId(p.pattern_id)
        seen.add(p.pattern_id)
        norm.append(p)
    if not norm:
        raise EmptyPattern("ruleset needs at least one pattern")
    return DpiRuleset(norm)


def scrub_replacement(length: int, seed: int) -> bytes:
    """Deterministic printable replacement string of exactly `length` bytes."""
    if length < 1:
        raise DpiError("replacement length must be >= 1")
    rng = random.Random(seed)
    return bytes(rng.choice(_SCRUB_ALPHABET) for _ in range(length))


@dataclass
class PolicyResult:
    verdict: str  # "forward" | "drop"
    datagram: Datagram | None
    events: list[LeakEvent]


def apply_policy(
    d: Datagram,
    matches: list[tuple[str, int]],
    policies: "PolicyStore",
    ruleset: DpiRuleset,
    app_id: str = "unknown",
    scrub_seed: int = 1337,
    now: float | None = None,
) -> PolicyResult:
    """Decide what happens to a datagram whose payload matched patterns.

    BLOCK on any matched pattern drops the whole datagram (the forwarder
    still ACKs the app leg so the app's transport stays alive).  SCRUB and
    ASK replace each occurrence with a same-length printable string; ASK
    additionally flags the event for an operator decision.  One event is
    emitted per matched pattern (first occurrence offset), not per
    occurrence.

    Scrubbing is re-checked: if a replacement accidentally forms a new
    occurrence of some non-ALLOW pattern, the payload is scrubbed again
    (fresh replacement bytes).  If a clean payload cannot be produced the
    datagram is dropped; a forwarded packet never carries a pattern whose
    policy is not ALLOW.
    """
    ts = time.time() if now is None else now
    flow = str(d.flow_key())

    first_offset: dict[str, int] = {}
    for pid, off in matches:
        if pid not in first_offset:
            first_offset[pid] = off

    actions = {pid: policies.effective_action(app_id, pid) for pid in first_offset}
    events = [
        LeakEvent(
            timestamp=ts,
            app_id=app_id,
            flow=flow,
            pattern_id=pid,
            label=ruleset.by_id[pid].label,
            offset=first_offset[pid],
            action=Action.SCRUB if actions[pid] is Action.ASK else actions[pid],
            needs_decision=actions[pid] is Action.ASK,
        )
        for pid in first_offset
    ]

    if any(a is Action.BLOCK for a in actions.values()):
        return PolicyResult("drop", None, events)

    if all(a is Action.ALLOW for a in actions.values()):
        return PolicyResult("forward", d, events)

    payload = bytearray(d.payload)
    current = matches
    for attempt in range(8):
        changed = False
        for pid, off in current:
            if actions.get(pid, Action.ASK) is Action.ALLOW:
                continue
            plen = len(ruleset.by_id[pid].data)
            payload[off : off + plen] = scrub_replacement(
                plen, scrub_seed ^ (off * 2654435761) ^ (attempt << 20)
            )
            changed = True
        if not changed:
            break
        current = [
            m
            for m in ruleset.inspect(payload)
            if policies.effective_action(app_id, m[0]) is not Action.ALLOW
        ]
        if not current:
            break
        for pid, off in current:
            if pid not in actions:
                actions[pid] = policies.effective_action(app_id, pid)
    else:
        return PolicyResult("drop", None, events)
    if current:
        return PolicyResult("drop", None, events)

    scrubbed = Datagram(
        ip=dataclasses.replace(d.ip),
        transport=dataclasses.replace(d.transport),
        payload=bytes(payload),
    )
    # round-trip through the serializer refreshes both checksums
    serialize_datagram(scrubbed)
    return PolicyResult("forward", scrubbed, events)


class PolicyStore:
    """(app_id, pattern_id) -> Action, persisted as JSON lines.

    The file is append-only; on load, later lines win.  Mutations take
    effect atomically for concurrent readers.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._entries: dict[tuple[str, str], Action] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for line in self.path.read_text().splitlines():
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                self._entries[(obj["app_id"], obj["pattern_id"])] = Action(obj["action"])

    def effective_action(self, app_id: str, pattern_id: str) -> Action:
        return self._entries.get((app_id, pattern_id), Action.ASK)

    def lookup(self, app_id: str, pattern_id: str) -> Action | None:
        return self._entries.get((app_id, pattern_id))

    def set(self, app_id: str, pattern_id: str, action: Action) -> None:
        with self._lock:
            self._entries[(app_id, pattern_id)] = action
            if self.path:
                with self.path.open("a") as f:
                    f.write(
                        json.dumps(
                            {"app_id": app_id, "pattern_id": pattern_id, "action": action.value}
                        )
                        + "\n"
                    )

    def entries(self) -> list[dict]:
        return [
            {"app_id": a, "pattern_id": p, "action": act.value}
            for (a, p), act in sorted(self._entries.items())
        ]


class LeakHistory:
    """Append-only leak event log, JSON lines on disk plus an in-memory tail."""

    def __init__(self, path: str | Path | None = None, keep: int = 10000):
        self.path = Path(path) if path else None
        self._tail: deque[LeakEvent] = deque(maxlen=keep)
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for line in self.path.read_text().splitlines():
                line = line.strip()
                if line:
                    self._tail.append(LeakEvent.from_json(json.loads(line)))

    def append(self, event: LeakEvent) -> None:
        with self._lock:
            self._tail.append(event)
            if self.path:
                with self.path.open("a") as f:
                    f.write(json.dumps(event.to_json()) + "\n")

    def since(self, t: float = 0.0) -> list[LeakEvent]:
        with self._lock:
            return [e for e in self._tail if e.timestamp > t]

    def __len__(self) -> int:
        return len(self._tail)


def _encode_pattern_bytes(data: bytes) -> tuple[str, str]:
    try:
        return data.decode("utf-8"), "utf-8"
    except UnicodeDecodeError:
        return base64.b64encode(data).decode("ascii"), "base64"


def pattern_to_json(p: Pattern) -> dict:
    text, enc = _encode_pattern_bytes(p.data)
    return {"id": p.pattern_id, "pattern": text, "label": p.label, "encoding": enc}


def pattern_from_json(obj: dict) -> Pattern:
    enc = obj.get("encoding", "utf-8")
    raw = obj["pattern"]
    data = base64.b64decode(raw) if enc == "base64" else raw.encode("utf-8")
    return Pattern(pattern_id=str(obj["id"]), data=data, label=obj.get("label", obj["id"]))


def load_patterns(path: str | Path) -> list[Pattern]:
    """Read a line-oriented JSON pattern file (one object per line)."""
    patterns = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            patterns.append(pattern_from_json(json.loads(line)))
    return patterns


def save_patterns(patterns: list[Pattern], path: str | Path) -> None:
    with Path(path).open("w") as f:
        for p in patterns:
            f.write(json.dumps(pattern_to_json(p)) + "\n")


def default_patterns() -> list[Pattern]:
    """A starter PII set: device identifiers, contact info, location."""
    return [
        Pattern("imei", b"356938035643809", "IMEI"),
        Pattern("device-id", b"a1b2c3d4e5f60718", "DeviceID"),
        Pattern("email", b"user@example.com", "Email"),
        Pattern("phone", b"+15559876543", "Phone#"),
        Pattern("location", b"33.6846,-117.8265", "Location"),
        Pattern("mac", b"02:42:ac:11:00:02", "MAC"),
        Pattern("serial", b"SN-9HX44T21", "Serial"),
        Pattern("token", b"sess_tok_0badc0de", "SessionToken"),
    ]


class DpiContext:
    """Everything the forwarder needs to inspect one outgoing datagram.

    The ruleset reference is swapped atomically when patterns change, so the
    forwarding worker always sees either the old or the new automaton, never
    a half-built one.  Policy reads go through the store's lock, which makes
    a policy change visible to every packet inspected after the change call
    returns.
    """

    def __init__(
        self,
        ruleset: DpiRuleset | None,
        policies: "PolicyStore",
        history: "LeakHistory | None" = None,
        scrub_seed: int = 1337,
    ):
        self.ruleset = ruleset
        self.policies = policies
        self.history = history
        self.scrub_seed = scrub_seed
        self.listeners: list = []
        self.inspected = 0
        self.blocked = 0
        self.scrubbed = 0

    def set_ruleset(self, ruleset: DpiRuleset | None) -> None:
        self.ruleset = ruleset

    def inspect_datagram(
        self, d: Datagram, app_id: str = "unknown", now: float | None = None
    ) -> PolicyResult | None:
        """Returns None when nothing matched (forward original unchanged)."""
        ruleset = self.ruleset
        if ruleset is None or not d.payload:
            return None
        self.inspected += 1
        matches = ruleset.inspect(d.payload)
        if not matches:
            return None
        result = apply_policy(
            d, matches, self.policies, ruleset,
            app_id=app_id, scrub_seed=self.scrub_seed, now=now,
        )
        if result.verdict == "drop":
            self.blocked += 1
        elif result.datagram is not None and result.datagram.payload != d.payload:
            self.scrubbed += 1
        if self.history is not None:
            for event in result.events:
                self.history.append(event)
        for listener in list(self.listeners):
            for event in result.events:
                listener(event)
        return result

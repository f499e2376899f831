"""Execution histories and offline correctness checks.

A history is a list of timestamped events. On the in-process transport the
clock is virtual: every event gets the next value of one global counter, so
real-time order is exact and free of skew. Over TCP each recorder stamps wall
time and per-recorder sequence numbers; merged histories are ordered by
(time, node, seq) and only per-node real-time claims are trusted.

File format: one JSON object per line, stable key order. Lines starting with
'#' carry run metadata (initial/final object states and definition kinds for
offline re-execution) and are not events.
"""

import json
import threading
import time as _time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

from . import objects as objmod

BEGIN = "BEGIN"
ACQUIRE = "ACQUIRE"
INVOKE = "INVOKE"
RESPONSE = "RESPONSE"
RELEASE = "RELEASE"
COMMIT = "COMMIT"
ABORT = "ABORT"

_FIELDS = ("seq", "time", "txn_id", "kind", "node_id", "object_id", "method",
           "op_class", "args", "payload", "pv", "extra")


@dataclass
class HistoryEvent:
    seq: int
    time: float
    txn_id: str
    kind: str
    node_id: str = ""
    object_id: Optional[str] = None
    method: Optional[str] = None
    op_class: Optional[str] = None
    args: Optional[list] = None
    payload: object = None
    pv: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _FIELDS}

    @staticmethod
    def from_dict(raw: dict) -> "HistoryEvent":
        return HistoryEvent(**{name: raw.get(name) for name in _FIELDS
                               if name != "extra"},
                            extra=raw.get("extra") or {})


class Recorder:
    """Wait-free-ish append log (one short lock) with a monotone sequence
    counter and either a virtual (= seq) or wall clock."""

    def __init__(self, virtual_clock: bool = True, node_id: str = ""):
        self.virtual_clock = virtual_clock
        self.node_id = node_id
        self.enabled = True
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._events: list[HistoryEvent] = []
        self._seq = 0

    def record(self, kind: str, txn_id: str, **fields) -> Optional[HistoryEvent]:
        if not self.enabled:
            return None
        with self._lock:
            self._seq += 1
            stamp = float(self._seq) if self.virtual_clock else _time.time()
            event = HistoryEvent(seq=self._seq, time=stamp, txn_id=txn_id,
                                 kind=kind, node_id=fields.pop("node_id", self.node_id),
                                 **fields)
            self._events.append(event)
            self._cond.notify_all()
        return event

    def snapshot(self) -> list[HistoryEvent]:
        with self._lock:
            return list(self._events)

    def clear(self) -> None:
        with self._lock:
            self._events.clear()

    def await_event(self, predicate: Callable[[HistoryEvent], bool],
                    timeout: float = 10.0) -> HistoryEvent:
        """Block until some recorded event satisfies the predicate. Used by
        scripted scenarios to order steps across transactions."""
        deadline = _time.monotonic() + timeout
        with self._lock:
            while True:
                for event in self._events:
                    if predicate(event):
                        return event
                remaining = deadline - _time.monotonic()
                if remaining <= 0:
                    raise TimeoutError("no matching event recorded in time")
                self._cond.wait(remaining)


def merge(histories: Iterable[list[HistoryEvent]]) -> list[HistoryEvent]:
    """Merge per-node logs by (time, node, seq) and re-sequence, so seq
    comparisons stay meaningful on the merged stream. Per-transaction order
    is preserved because one transaction's events share a recorder."""
    merged = [e for h in histories for e in h]
    merged.sort(key=lambda e: (e.time, e.node_id, e.seq))
    return [replace(e, seq=i) for i, e in enumerate(merged, 1)]


# -- file io ----------------------------------------------------------------------

def write_history(path: str, events: list[HistoryEvent], meta: Optional[dict] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if meta:
            fh.write("#meta " + json.dumps(meta, sort_keys=True) + "\n")
        for event in events:
            fh.write(json.dumps(event.to_dict()) + "\n")


def read_history(path: str) -> tuple[list[HistoryEvent], dict]:
    events: list[HistoryEvent] = []
    meta: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#meta "):
                meta.update(json.loads(line[len("#meta "):]))
            elif line.startswith("#"):
                continue
            else:
                events.append(HistoryEvent.from_dict(json.loads(line)))
    return events, meta


# -- version-order check ----------------------------------------------------------

def check_version_order(events: list[HistoryEvent]) -> list[str]:
    """Empty iff, per object, (a) the release sequence is exactly the
    consecutive version sequence 1, 2, ... with no inversions or gaps, and
    (b) every first direct access happens strictly after the release that
    enabled it (its predecessor's).

    These are the orderings the recording faithfully witnesses: releases are
    recorded under the object's guard before the counter bump that wakes the
    successor, and a response is recorded by the same flow that performed the
    access. The mutual order of two different transactions' response records
    is scheduling noise and deliberately not checked; access order itself is
    pinned by (a)+(b), since every access sits between two consecutive
    releases."""
    violations: list[str] = []
    pv_of: dict[tuple[str, str], int] = {}
    for event in events:
        if event.kind == ACQUIRE and event.extra.get("pvs"):
            for oid, pv in event.extra["pvs"].items():
                pv_of[(event.txn_id, oid)] = pv

    releases: dict[str, list[HistoryEvent]] = {}
    accesses: dict[str, list[HistoryEvent]] = {}
    for event in events:
        if event.kind == RELEASE:
            releases.setdefault(event.object_id, []).append(event)
        elif event.kind == RESPONSE and event.extra.get("first_direct"):
            accesses.setdefault(event.object_id, []).append(event)

    for oid, rels in releases.items():
        expected = 1
        for event in rels:
            if event.pv != expected:
                violations.append(
                    f"{oid}: release pv={event.pv} at seq={event.seq}, expected {expected}")
            expected = (event.pv or expected) + 1

    release_seq = {(e.object_id, e.pv): e.seq for rels in releases.values() for e in rels}
    for oid, accs in accesses.items():
        for event in accs:
            pv = pv_of.get((event.txn_id, oid))
            if pv is None:
                violations.append(f"{oid}: direct access by {event.txn_id} without a version")
                continue
            if pv > 1:
                enabling = release_seq.get((oid, pv - 1))
                if enabling is None or enabling > event.seq:
                    violations.append(
                        f"{oid}: access pv={pv} at seq={event.seq} precedes release of pv={pv - 1}")
    return violations


# -- serializability check -----------------------------------------------------------

@dataclass
class SerializabilityResult:
    status: str                      # "serializable" | "violation" | "unchecked"
    order: Optional[list[str]] = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.status == "serializable"


def _normalize(value):
    if isinstance(value, tuple):
        return [_normalize(v) for v in value]
    if isinstance(value, list):
        return [_normalize(v) for v in value]
    if isinstance(value, dict):
        return {k: _normalize(v) for k, v in value.items()}
    return value


def committed_transactions(events: list[HistoryEvent]) -> dict[str, dict]:
    """Per committed transaction: operation list in program order plus begin
    and commit timestamps."""
    txns: dict[str, dict] = {}
    pending_invoke: dict[str, HistoryEvent] = {}
    for event in events:
        info = txns.setdefault(event.txn_id,
                               {"ops": [], "begin": None, "commit": None})
        if event.kind == BEGIN:
            info["begin"] = event.time
        elif event.kind == INVOKE:
            pending_invoke[event.txn_id] = event
        elif event.kind == RESPONSE:
            invoke = pending_invoke.pop(event.txn_id, None)
            if invoke is not None and not event.extra.get("error"):
                info["ops"].append((invoke.object_id, invoke.method,
                                    tuple(invoke.args or ()), _normalize(event.payload)))
        elif event.kind == COMMIT:
            info["commit"] = event.time
    return {tid: info for tid, info in txns.items() if info["commit"] is not None}


def check_serializable(events: list[HistoryEvent],
                       init_states: dict[str, dict],
                       defs: dict[str, objmod.SharedObjectDef],
                       final_states: Optional[dict[str, dict]] = None,
                       max_txns: int = 7) -> SerializabilityResult:
    """Brute-force witness search: is there a permutation of the committed
    transactions, consistent with real-time precedence, whose sequential
    replay from the initial states reproduces every recorded response payload
    (and the final states, when given)?"""
    txns = committed_transactions(events)
    ids = sorted(txns)
    if len(ids) > max_txns:
        return SerializabilityResult(
            "unchecked", detail=f"{len(ids)} committed transactions exceed bound {max_txns}")

    # Real-time precedence: T before T' whenever T committed before T' began.
    must_precede = {t: set() for t in ids}
    for a in ids:
        for b in ids:
            if a != b and txns[a]["commit"] < (txns[b]["begin"] or float("inf")):
                must_precede[b].add(a)

    def replay(txn_id: str, states: dict[str, dict]) -> bool:
        for oid, method, args, expected in txns[txn_id]["ops"]:
            spec = defs[oid].method(method)
            got = objmod.run_method(spec, states[oid], args)
            if _normalize(got) != expected:
                return False
        return True

    import copy

    def search(placed: list[str], remaining: set[str], states: dict[str, dict]):
        if not remaining:
            if final_states is not None:
                if {k: _normalize(v) for k, v in states.items()} != \
                        {k: _normalize(v) for k, v in final_states.items()}:
                    return None
            return list(placed)
        for cand in sorted(remaining):
            if must_precede[cand] & remaining:
                continue
            trial = copy.deepcopy(states)
            if not replay(cand, trial):
                continue
            placed.append(cand)
            remaining.discard(cand)
            found = search(placed, remaining, trial)
            if found is not None:
                return found
            placed.pop()
            remaining.add(cand)
        return None

    states0 = {oid: dict(state) for oid, state in init_states.items()}
    order = search([], set(ids), copy.deepcopy(states0))
    if order is None:
        return SerializabilityResult("violation",
                                     detail="no equivalent sequential order exists")
    return SerializabilityResult("serializable", order=order)


# -- abort accounting ----------------------------------------------------------------

@dataclass
class AbortReport:
    commits: int
    manual_aborts: int
    forced_aborts: int
    groups: list[set]
    violations: list[str]

    def ok(self) -> bool:
        return not self.violations


def check_abort_accounting(events: list[HistoryEvent]) -> AbortReport:
    """Counts outcomes and checks two claims: no forced aborts can exist
    without a manual abort somewhere, and no conflict group (transactions
    linked by shared declared objects) consists entirely of forced aborts —
    someone in every group makes progress or chose to quit."""
    outcome: dict[str, str] = {}
    declared: dict[str, set] = {}
    for event in events:
        if event.kind == BEGIN:
            declared[event.txn_id] = set(event.extra.get("declared", []))
        elif event.kind == COMMIT:
            outcome[event.txn_id] = "commit"
        elif event.kind == ABORT:
            outcome[event.txn_id] = event.extra.get("mode", "manual")

    commits = sum(1 for o in outcome.values() if o == "commit")
    manual = sum(1 for o in outcome.values() if o == "manual")
    forced = sum(1 for o in outcome.values() if o == "forced")

    parent: dict[str, str] = {t: t for t in declared}

    def find(t):
        while parent[t] != t:
            parent[t] = parent[parent[t]]
            t = parent[t]
        return t

    by_object: dict[str, str] = {}
    for tid, objs in declared.items():
        for oid in objs:
            if oid in by_object:
                a, b = find(tid), find(by_object[oid])
                if a != b:
                    parent[a] = b
            else:
                by_object[oid] = tid

    groups_map: dict[str, set] = {}
    for tid in declared:
        groups_map.setdefault(find(tid), set()).add(tid)
    groups = list(groups_map.values())

    violations = []
    if manual == 0 and forced > 0:
        violations.append(f"{forced} forced aborts with zero manual aborts")
    for group in groups:
        outcomes = {outcome.get(t) for t in group}
        if outcomes and outcomes <= {"forced"}:
            violations.append(f"conflict group {sorted(group)} aborted entirely by force")
    return AbortReport(commits, manual, forced, groups, violations)

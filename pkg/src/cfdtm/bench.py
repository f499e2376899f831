"""Distributed microbenchmark driver, scripted scenarios, and CSV reporting.

The synthetic workload follows the usual three-array shape. The hot array
(per node) is visible to every client and is where contention happens. The
mild array is per client: its objects go through the full transactional
machinery, but partitioning guarantees no cross-client conflicts. The cold
array is per client and accessed entirely outside transactions, with no
transport involved. Every object is a reference cell whose operations sleep
op_latency_ms on the home node to model real computation.

Object selection honors temporal locality: with probability
locality_probability the next object is drawn from the transaction's recent
accesses (up to history_length of them, per array), otherwise uniformly from
the whole array. Declared call bounds are computed exactly from the generated
script, so a benchmark run never trips a bound.

Transaction begins are globally sequenced (a turnstile over (txn index,
client index)) by default: version assignment, and therefore every committed
read payload, then depends only on the seed and not on thread scheduling or
the transport.
"""

import random
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import history as hist
from .client import Session, Transaction
from .errors import CfdtmError, ForcedAbortError
from .objects import reference_cell
from .transport import Channel, LocalCluster, TcpChannel

SCENARIO_NAMES = ("access-control", "early-release", "cascade",
                  "read-only-async", "last-write-async")

CSV_COLUMNS = ("algorithm", "nodes", "clients", "read_ratio", "throughput_ops_s",
               "p50_ms", "p99_ms", "manual_aborts", "forced_aborts")


@dataclass
class BenchConfig:
    nodes: int = 2
    clients_per_node: int = 4
    algorithm: str = "optsva-cf"
    hot_array_size: int = 10          # objects per node
    mild_array_size: int = 8          # objects per client
    cold_array_size: int = 8          # plain values per client
    ops_hot: int = 10                 # per transaction
    ops_mild: int = 0
    ops_cold: Optional[int] = None    # None: same as ops_hot
    read_ratio: float = 0.9
    locality_probability: float = 0.5
    history_length: int = 5
    op_latency_ms: float = 0.0
    txns_per_client: int = 10
    seed: int = 1
    deterministic_begin: bool = True
    record_history: bool = False
    wait_timeout: Optional[float] = 120.0
    transport: str = "local"          # "local" | "tcp"
    node_addrs: list = field(default_factory=list)
    heartbeat_interval: Optional[float] = None

    def validate(self) -> None:
        if not 0.0 <= self.read_ratio <= 1.0:
            raise ValueError(f"read_ratio {self.read_ratio} outside [0, 1]")
        if not 0.0 <= self.locality_probability <= 1.0:
            raise ValueError(
                f"locality_probability {self.locality_probability} outside [0, 1]")
        if self.nodes < 1 or self.clients_per_node < 1:
            raise ValueError("need at least one node and one client")
        if self.transport not in ("local", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.transport == "tcp" and not self.node_addrs:
            raise ValueError("tcp transport needs node_addrs")

    @property
    def total_clients(self) -> int:
        return self.nodes * self.clients_per_node

    @property
    def cold_ops(self) -> int:
        return self.ops_hot if self.ops_cold is None else self.ops_cold


# -- workload generation ----------------------------------------------------------

@dataclass
class OpSpec:
    object_id: str
    kind: str                  # "read" | "write"
    value: Optional[int] = None


@dataclass
class TxnScript:
    ops: list                  # list[OpSpec]
    suprema: dict              # object_id -> (max_reads, max_writes)
    cold_ops: list             # list[(index, value|None)]


@dataclass
class ClientScript:
    client_index: int
    node_index: int
    txns: list


def hot_object_ids(cfg: BenchConfig) -> list[str]:
    return [f"hot-{n}-{i}" for n in range(cfg.nodes)
            for i in range(cfg.hot_array_size)]


def mild_object_ids(cfg: BenchConfig, client_index: int) -> list[str]:
    return [f"mild-{client_index}-{i}" for i in range(cfg.mild_array_size)]


def hosted_objects(cfg: BenchConfig) -> list[tuple[int, str]]:
    """(node_index, object_id) for every transactional object; shared by the
    in-process setup and the standalone node command."""
    placed = [(n, f"hot-{n}-{i}") for n in range(cfg.nodes)
              for i in range(cfg.hot_array_size)]
    for c in range(cfg.total_clients):
        placed.extend((c % cfg.nodes, oid) for oid in mild_object_ids(cfg, c))
    return placed


def generate_workload(cfg: BenchConfig) -> list[ClientScript]:
    """Deterministic for a fixed seed: one child generator per client, seeded
    in client order from the master."""
    cfg.validate()
    master = random.Random(cfg.seed)
    hot_ids = hot_object_ids(cfg)
    scripts = []
    for c in range(cfg.total_clients):
        rng = random.Random(master.getrandbits(64))
        mild_ids = mild_object_ids(cfg, c)
        txns = []
        for _ in range(cfg.txns_per_client):
            txns.append(_generate_txn(cfg, rng, hot_ids, mild_ids))
        scripts.append(ClientScript(c, c % cfg.nodes, txns))
    return scripts


def _generate_txn(cfg: BenchConfig, rng: random.Random,
                  hot_ids: list[str], mild_ids: list[str]) -> TxnScript:
    slots = ["hot"] * cfg.ops_hot + (["mild"] * cfg.ops_mild if mild_ids else [])
    rng.shuffle(slots)
    recent: dict[str, list[str]] = {"hot": [], "mild": []}
    ops: list[OpSpec] = []
    counts: dict[str, list[int]] = {}
    for slot in slots:
        pool = hot_ids if slot == "hot" else mild_ids
        history = recent[slot]
        if history and rng.random() < cfg.locality_probability:
            oid = rng.choice(history[-cfg.history_length:])
        else:
            oid = rng.choice(pool)
        history.append(oid)
        if rng.random() < cfg.read_ratio:
            ops.append(OpSpec(oid, "read"))
            counts.setdefault(oid, [0, 0])[0] += 1
        else:
            ops.append(OpSpec(oid, "write", rng.randrange(1_000_000)))
            counts.setdefault(oid, [0, 0])[1] += 1
    cold = []
    if cfg.cold_array_size:
        for _ in range(cfg.cold_ops):
            index = rng.randrange(cfg.cold_array_size)
            if rng.random() < cfg.read_ratio:
                cold.append((index, None))
            else:
                cold.append((index, rng.randrange(1_000_000)))
    suprema = {oid: (reads, writes) for oid, (reads, writes) in counts.items()}
    return TxnScript(ops, suprema, cold)


# -- begin sequencing ------------------------------------------------------------------

class BeginSequencer:
    """Turnstile that forces transaction begins into one global order. The
    slot is held through version (or lock) acquisition, which pins the entire
    version assignment for a fixed seed. A client that dies must abort() the
    turnstile so waiters on its future slots fail fast instead of timing out."""

    def __init__(self):
        self._cond = threading.Condition()
        self._next = 0
        self._broken = False

    def run_in_turn(self, slot: int, action: Callable[[], None],
                    timeout: float = 300.0) -> None:
        with self._cond:
            if not self._cond.wait_for(
                    lambda: self._broken or self._next == slot, timeout):
                raise TimeoutError(f"begin slot {slot} never came up")
            if self._broken:
                raise RuntimeError("begin sequencing aborted by a failed client")
        try:
            action()
        finally:
            with self._cond:
                self._next = slot + 1
                self._cond.notify_all()

    def abort(self) -> None:
        with self._cond:
            self._broken = True
            self._cond.notify_all()


# -- report -------------------------------------------------------------------------------

@dataclass
class BenchReport:
    algorithm: str
    nodes: int
    clients: int
    read_ratio: float
    throughput_ops_s: float
    p50_ms: float
    p99_ms: float
    manual_aborts: int
    forced_aborts: int
    wall_seconds: float = 0.0
    committed: int = 0
    shared_ops: int = 0
    wait_seconds: float = 0.0
    read_payloads: dict = field(default_factory=dict)   # client -> [payload]
    events: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_row(self) -> list[str]:
        return [self.algorithm, str(self.nodes), str(self.clients),
                f"{self.read_ratio:g}", f"{self.throughput_ops_s:.3f}",
                f"{self.p50_ms:.3f}", f"{self.p99_ms:.3f}",
                str(self.manual_aborts), str(self.forced_aborts)]


def emit_csv(reports: list[BenchReport], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for report in reports:
            fh.write(",".join(report.to_row()) + "\n")


def parse_csv(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


# -- driver ------------------------------------------------------------------------------------

def run_benchmark(cfg: BenchConfig) -> BenchReport:
    cfg.validate()
    scripts = generate_workload(cfg)
    cluster = None
    if cfg.transport == "local":
        cluster = LocalCluster(cfg.nodes, wait_timeout=cfg.wait_timeout,
                               executor_workers=4)
        latency = cfg.op_latency_ms / 1000.0
        for node_index, oid in hosted_objects(cfg):
            cluster.register(node_index, oid, reference_cell(latency))
        channel: Channel = cluster.channel()
        recorder = cluster.recorder
    else:
        channel = TcpChannel(cfg.node_addrs)
        recorder = hist.Recorder(virtual_clock=False, node_id="driver")
    recorder.enabled = cfg.record_history

    sequencer = BeginSequencer() if cfg.deterministic_begin else None
    barrier = threading.Barrier(cfg.total_clients + 1)
    lock = threading.Lock()
    latencies: list[float] = []
    outcomes = {"committed": 0, "manual": 0, "forced": 0}
    shared_ops = 0
    read_payloads: dict[str, list] = {}
    errors: list[BaseException] = []

    def client_main(script: ClientScript) -> None:
        nonlocal shared_ops
        session = Session(channel, recorder=recorder,
                          client_id=f"client{script.client_index}")
        payloads: list = []
        cold_store = [0] * cfg.cold_array_size
        barrier.wait()
        for t, txn_script in enumerate(script.txns):
            for index, value in txn_script.cold_ops:
                if value is None:
                    _ = cold_store[index]
                else:
                    cold_store[index] = value
                if cfg.op_latency_ms:
                    time.sleep(cfg.op_latency_ms / 1000.0)
            txn = Transaction(session, algorithm=cfg.algorithm,
                              heartbeat_interval=cfg.heartbeat_interval)
            stubs = {}
            for oid, (reads, writes) in sorted(txn_script.suprema.items()):
                stubs[oid] = txn.accesses(session.locate(oid),
                                          max_reads=reads, max_writes=writes,
                                          max_updates=0)
            started = time.monotonic()
            try:
                if sequencer is not None:
                    slot = t * cfg.total_clients + script.client_index
                    sequencer.run_in_turn(slot, txn.begin)
                else:
                    txn.begin()
                txn_payloads = []
                for op in txn_script.ops:
                    if op.kind == "read":
                        txn_payloads.append(stubs[op.object_id].read())
                    else:
                        stubs[op.object_id].write(op.value)
                outcome = txn.commit()
            except ForcedAbortError:
                with lock:
                    outcomes["forced"] += 1
                continue
            finally:
                elapsed_ms = (time.monotonic() - started) * 1000.0
                with lock:
                    latencies.append(elapsed_ms)
            if outcome.committed:
                payloads.extend(txn_payloads)
                with lock:
                    outcomes["committed"] += 1
                    shared_ops += len(txn_script.ops)
            else:
                with lock:
                    outcomes["manual" if not outcome.forced else "forced"] += 1
        with lock:
            read_payloads[f"client{script.client_index}"] = payloads

    def client_guarded(script: ClientScript) -> None:
        try:
            client_main(script)
        except BaseException as exc:  # noqa: BLE001 - surfaced after the joins
            with lock:
                errors.append(exc)
            barrier.abort()
            if sequencer is not None:
                sequencer.abort()

    threads = [threading.Thread(target=client_guarded, args=(script,),
                                name=f"bench-client{script.client_index}")
               for script in scripts]
    for thread in threads:
        thread.start()
    try:
        barrier.wait()
    except threading.BrokenBarrierError:
        pass  # a client died during setup; its error is already collected
    t0 = time.monotonic()
    deadline = time.monotonic() + (cfg.wait_timeout or 300.0) * 4
    for thread in threads:
        thread.join(max(0.1, deadline - time.monotonic()))
        if thread.is_alive():
            errors.append(TimeoutError(f"{thread.name} hung"))
    wall = time.monotonic() - t0

    session = Session(channel, recorder=hist.Recorder())
    try:
        stats = session.node_stats()
    except CfdtmError:
        stats = {}
    events = recorder.snapshot() if cfg.record_history else []
    if cluster is not None:
        cluster.close()
    if errors:
        raise errors[0]

    p50 = statistics.median(latencies) if latencies else 0.0
    p99 = (statistics.quantiles(latencies, n=100)[98]
           if len(latencies) >= 2 else p50)
    return BenchReport(
        algorithm=cfg.algorithm, nodes=cfg.nodes, clients=cfg.total_clients,
        read_ratio=cfg.read_ratio,
        throughput_ops_s=(shared_ops / wall) if wall > 0 else 0.0,
        p50_ms=p50, p99_ms=p99,
        manual_aborts=outcomes["manual"], forced_aborts=outcomes["forced"],
        wall_seconds=wall, committed=outcomes["committed"],
        shared_ops=shared_ops, wait_seconds=stats.get("wait_seconds", 0.0),
        read_payloads=read_payloads, events=events,
        meta={"seed": cfg.seed, "transport": cfg.transport})


# -- scripted scenarios ---------------------------------------------------------------------------

@dataclass
class ScenarioCheck:
    description: str
    ok: bool
    expected: object = None
    observed: object = None

    def diff(self) -> str:
        status = "ok" if self.ok else "FAIL"
        out = f"[{status}] {self.description}"
        if not self.ok:
            out += f" (expected {self.expected!r}, observed {self.observed!r})"
        return out


@dataclass
class ScenarioResult:
    name: str
    checks: list
    events: list
    final_states: dict

    @property
    def passed(self) -> bool:
        return all(check.ok for check in self.checks)

    def report(self) -> str:
        lines = [f"scenario {self.name}: {'PASS' if self.passed else 'FAIL'}"]
        lines.extend("  " + check.diff() for check in self.checks)
        return "\n".join(lines)


class _ScenarioHarness:
    """One-node virtual-clock cluster plus thread plumbing for interleaving
    scripts: begins are sequenced, cross-transaction ordering is imposed with
    plain events and recorder lookups, and every join is bounded."""

    def __init__(self, objects: dict):
        self.cluster = LocalCluster(1, wait_timeout=30.0, executor_workers=2)
        for oid, def_ in objects.items():
            self.cluster.register(0, oid, def_)
        self.recorder = self.cluster.recorder
        self.sequencer = BeginSequencer()
        self.errors: dict[str, BaseException] = {}
        self.outcomes: dict[str, object] = {}
        self.threads: list[threading.Thread] = []

    def session(self, name: str) -> Session:
        return Session(self.cluster.channel(), recorder=self.recorder, client_id=name)

    def spawn(self, name: str, fn: Callable[[], None]) -> None:
        def runner():
            try:
                fn()
            except BaseException as exc:  # noqa: BLE001 - reported as a check
                self.errors[name] = exc
        thread = threading.Thread(target=runner, name=name)
        self.threads.append(thread)
        thread.start()

    def join_all(self, timeout: float = 30.0) -> list[str]:
        hung = []
        deadline = time.monotonic() + timeout
        for thread in self.threads:
            thread.join(max(0.1, deadline - time.monotonic()))
            if thread.is_alive():
                hung.append(thread.name)
        return hung

    def await_event(self, predicate, timeout: float = 20.0) -> hist.HistoryEvent:
        return self.recorder.await_event(predicate, timeout)

    def finish(self, peek: list) -> tuple[list, dict]:
        events = self.recorder.snapshot()
        session = self.session("peek")
        finals = {oid: session.peek_state(session.locate(oid)) for oid in peek}
        self.cluster.close()
        return events, finals

    def liveness_check(self, hung: list) -> ScenarioCheck:
        problems = list(hung) + [f"{name}: {exc!r}" for name, exc in self.errors.items()]
        return ScenarioCheck("every transaction ran to completion", not problems,
                             [], problems)

    def txn_of(self, events: list, client: str) -> str:
        return next((e.txn_id for e in events if e.txn_id.startswith(client)), "")


def _first(events, **want):
    for event in events:
        if all(getattr(event, key) == value for key, value in want.items()):
            return event
    return None


def _gated_read_cell(gate: threading.Event):
    """Reference cell whose read body additionally waits for a test-side
    event; scenarios use it to pin response ordering deterministically."""
    from .objects import MethodSpec, OpClass, SharedObjectDef

    def _read(s):
        if not gate.wait(20.0):
            raise TimeoutError("read gate never opened")
        return s["value"]

    def _write(s, v):
        s["value"] = v

    return SharedObjectDef(
        kind="refcell",
        methods=[MethodSpec("read", OpClass.READ, _read),
                 MethodSpec("write", OpClass.WRITE, _write)],
        initial_state=lambda: {"value": 0},
    )


def run_scenario(name: str) -> ScenarioResult:
    if name not in SCENARIO_NAMES:
        raise ValueError(f"unknown scenario {name!r}; pick one of {SCENARIO_NAMES}")
    return _SCENARIOS[name]()


def _scenario_access_control() -> ScenarioResult:
    """No call bounds declared: the object is handed over only at commit, so
    the second transaction's response lands strictly after the first
    transaction's commit, while an unrelated transaction runs in parallel."""
    from .objects import reference_cell as _rc
    i_committed = threading.Event()
    h = _ScenarioHarness({"x": _gated_read_cell(i_committed), "y": _rc()})

    def t_i():
        session = h.session("ti")
        txn = Transaction(session)
        x = txn.accesses(session.locate("x"))
        h.sequencer.run_in_turn(0, txn.begin)
        x.write(1)
        h.await_event(lambda e: e.kind == hist.INVOKE and e.object_id == "x"
                      and e.txn_id.startswith("tj"))
        h.await_event(lambda e: e.kind == hist.COMMIT and e.txn_id.startswith("tk"))
        h.outcomes["ti"] = txn.commit()
        i_committed.set()

    def t_j():
        session = h.session("tj")
        txn = Transaction(session)
        x = txn.accesses(session.locate("x"))
        h.sequencer.run_in_turn(1, txn.begin)
        h.outcomes["tj_read"] = x.read()
        h.outcomes["tj"] = txn.commit()

    def t_k():
        session = h.session("tk")
        txn = Transaction(session)
        y = txn.accesses(session.locate("y"))
        h.sequencer.run_in_turn(2, txn.begin)
        h.outcomes["tk_read"] = y.read()
        h.outcomes["tk"] = txn.commit()

    for name_, fn in (("ti", t_i), ("tj", t_j), ("tk", t_k)):
        h.spawn(name_, fn)
    hung = h.join_all()
    events, finals = h.finish(["x"])

    checks = [h.liveness_check(hung)]
    i_commit = _first(events, kind=hist.COMMIT, txn_id=h.txn_of(events, "ti"))
    j_invoke = _first(events, kind=hist.INVOKE, object_id="x",
                      txn_id=h.txn_of(events, "tj"))
    j_resp = _first(events, kind=hist.RESPONSE, object_id="x",
                    txn_id=h.txn_of(events, "tj"))
    k_resp = _first(events, kind=hist.RESPONSE, object_id="y",
                    txn_id=h.txn_of(events, "tk"))
    if i_commit and j_invoke and j_resp and k_resp:
        checks.append(ScenarioCheck(
            "contender invoked while the holder was still running",
            j_invoke.seq < i_commit.seq, True, j_invoke.seq < i_commit.seq))
        checks.append(ScenarioCheck(
            "contender's response strictly after the holder's commit",
            j_resp.seq > i_commit.seq, True, j_resp.seq > i_commit.seq))
        checks.append(ScenarioCheck(
            "contender read the committed value",
            h.outcomes.get("tj_read") == 1, 1, h.outcomes.get("tj_read")))
        checks.append(ScenarioCheck(
            "unrelated transaction committed before the holder",
            k_resp.seq < i_commit.seq, True, k_resp.seq < i_commit.seq))
    else:
        checks.append(ScenarioCheck("expected events recorded", False,
                                    "all events", "missing"))
    return ScenarioResult("access-control", checks, events, finals)


def _scenario_early_release() -> ScenarioResult:
    """A call bound of one lets the holder hand the object over right after
    its only operation; the successor's response lands before the holder even
    starts committing."""
    from .objects import counter_cell
    h = _ScenarioHarness({"x": counter_cell()})

    def t_i():
        session = h.session("ti")
        txn = Transaction(session)
        x = txn.updates(session.locate("x"), max_updates=1)
        h.sequencer.run_in_turn(0, txn.begin)
        h.outcomes["ti_inc"] = x.increment()
        h.await_event(lambda e: e.kind == hist.RESPONSE and e.object_id == "x"
                      and e.txn_id.startswith("tj"))
        h.outcomes["ti"] = txn.commit()

    def t_j():
        session = h.session("tj")
        txn = Transaction(session)
        x = txn.accesses(session.locate("x"))
        h.sequencer.run_in_turn(1, txn.begin)
        h.outcomes["tj_read"] = x.read()
        h.outcomes["tj"] = txn.commit()

    h.spawn("ti", t_i)
    h.spawn("tj", t_j)
    hung = h.join_all()
    events, finals = h.finish(["x"])

    checks = [h.liveness_check(hung)]
    i_commit = _first(events, kind=hist.COMMIT, txn_id=h.txn_of(events, "ti"))
    j_resp = _first(events, kind=hist.RESPONSE, object_id="x",
                    txn_id=h.txn_of(events, "tj"))
    release = _first(events, kind=hist.RELEASE, object_id="x", pv=1)
    if i_commit and j_resp and release:
        checks.append(ScenarioCheck(
            "object released before the holder committed",
            release.seq < i_commit.seq, True, release.seq < i_commit.seq))
        checks.append(ScenarioCheck(
            "successor's response before the holder's commit",
            j_resp.seq < i_commit.seq, True, j_resp.seq < i_commit.seq))
        checks.append(ScenarioCheck(
            "successor read the early-released value",
            h.outcomes.get("tj_read") == 1, 1, h.outcomes.get("tj_read")))
    else:
        checks.append(ScenarioCheck("expected events recorded", False,
                                    "all events", "missing"))
    return ScenarioResult("early-release", checks, events, finals)


def _scenario_cascade() -> ScenarioResult:
    """Abort after early release: the successor consumed state the aborter
    then invalidated, so the successor's commit turns into a forced abort and
    the object ends at the aborter's checkpoint."""
    from .objects import counter_cell
    h = _ScenarioHarness({"x": counter_cell()})
    boot = h.session("init")
    initial_state = boot.peek_state(boot.locate("x"))

    def t_i():
        session = h.session("ti")
        txn = Transaction(session)
        x = txn.updates(session.locate("x"), max_updates=1)
        h.sequencer.run_in_turn(0, txn.begin)
        x.increment()
        h.await_event(lambda e: e.kind == hist.RESPONSE and e.object_id == "x"
                      and e.txn_id.startswith("tj"))
        txn.abort()
        h.outcomes["ti"] = "manual-abort"

    def t_j():
        session = h.session("tj")
        txn = Transaction(session)
        x = txn.updates(session.locate("x"), max_updates=1)
        h.sequencer.run_in_turn(1, txn.begin)
        h.outcomes["tj_inc"] = x.increment()
        h.outcomes["tj"] = txn.commit()

    h.spawn("ti", t_i)
    h.spawn("tj", t_j)
    hung = h.join_all()
    events, finals = h.finish(["x"])

    checks = [h.liveness_check(hung)]
    report = hist.check_abort_accounting(events)
    tj = h.outcomes.get("tj")
    checks.append(ScenarioCheck("exactly one manual abort",
                                report.manual_aborts == 1, 1, report.manual_aborts))
    checks.append(ScenarioCheck("exactly one forced abort",
                                report.forced_aborts == 1, 1, report.forced_aborts))
    checks.append(ScenarioCheck(
        "successor's commit came back as a forced abort",
        tj is not None and not tj.committed and tj.forced, True,
        None if tj is None else (tj.status, tj.forced)))
    checks.append(ScenarioCheck(
        "successor saw the aborter's uncommitted value before the cascade",
        h.outcomes.get("tj_inc") == 2, 2, h.outcomes.get("tj_inc")))
    checks.append(ScenarioCheck(
        "object restored to the aborter's checkpoint",
        finals.get("x") == initial_state, initial_state, finals.get("x")))
    i_abort = _first(events, kind=hist.ABORT, txn_id=h.txn_of(events, "ti"))
    j_abort = _first(events, kind=hist.ABORT, txn_id=h.txn_of(events, "tj"))
    if i_abort and j_abort:
        checks.append(ScenarioCheck(
            "terminations ordered by version",
            i_abort.seq < j_abort.seq, True, i_abort.seq < j_abort.seq))
    return ScenarioResult("cascade", checks, events, finals)


def _scenario_read_only_async() -> ScenarioResult:
    """A reader-only transaction snapshots and releases in the background;
    its reads then run on the buffer while the next writer already owns and
    overwrites the live object."""
    from .objects import counter_cell
    k_done = threading.Event()
    h = _ScenarioHarness({"x": counter_cell()})

    def t_i():
        session = h.session("ti")
        txn = Transaction(session)
        x = txn.updates(session.locate("x"), max_updates=1)
        h.sequencer.run_in_turn(0, txn.begin)
        x.increment()
        h.outcomes["ti"] = txn.commit()

    def t_j():
        session = h.session("tj")
        txn = Transaction(session)
        x = txn.reads(session.locate("x"), max_reads=2)
        h.sequencer.run_in_turn(1, txn.begin)
        if not k_done.wait(20.0):
            raise TimeoutError("writer never finished")
        h.outcomes["tj_reads"] = [x.read(), x.read()]
        h.outcomes["tj"] = txn.commit()

    def t_k():
        session = h.session("tk")
        txn = Transaction(session)
        x = txn.accesses(session.locate("x"), max_reads=1, max_writes=1,
                         max_updates=0)
        h.sequencer.run_in_turn(2, txn.begin)
        h.outcomes["tk_read"] = x.read()
        x.write(2)
        k_done.set()
        h.outcomes["tk"] = txn.commit()

    for name_, fn in (("ti", t_i), ("tj", t_j), ("tk", t_k)):
        h.spawn(name_, fn)
    hung = h.join_all()
    events, finals = h.finish(["x"])

    checks = [h.liveness_check(hung)]
    tj_txn = h.txn_of(events, "tj")
    tk_txn = h.txn_of(events, "tk")
    k_invoke = _first(events, kind=hist.INVOKE, object_id="x", txn_id=tk_txn)
    j_first_invoke = _first(events, kind=hist.INVOKE, object_id="x", txn_id=tj_txn)
    j_first_resp = _first(events, kind=hist.RESPONSE, object_id="x", txn_id=tj_txn)
    prefetch_release = _first(events, kind=hist.RELEASE, object_id="x", pv=2)
    k_write_resp = next((e for e in events if e.kind == hist.RESPONSE
                         and e.txn_id == tk_txn and e.method == "write"), None)
    checks.append(ScenarioCheck(
        "reader's buffered reads both saw the snapshot",
        h.outcomes.get("tj_reads") == [1, 1], [1, 1], h.outcomes.get("tj_reads")))
    checks.append(ScenarioCheck(
        "writer read the predecessor's value from the live object",
        h.outcomes.get("tk_read") == 1, 1, h.outcomes.get("tk_read")))
    if k_invoke and j_first_invoke and j_first_resp and prefetch_release and k_write_resp:
        checks.append(ScenarioCheck(
            "background snapshot released the object before the reader's first read",
            prefetch_release.seq < j_first_invoke.seq, True,
            prefetch_release.seq < j_first_invoke.seq))
        checks.append(ScenarioCheck(
            "writer's first access started before the reader's first read completed",
            k_invoke.seq < j_first_resp.seq, True, k_invoke.seq < j_first_resp.seq))
        checks.append(ScenarioCheck(
            "writer overwrote the object while reads were still pending",
            k_write_resp.seq < j_first_invoke.seq, True,
            k_write_resp.seq < j_first_invoke.seq))
        buffered = [e for e in events if e.kind == hist.RESPONSE
                    and e.txn_id == tj_txn and e.object_id == "x"
                    and not e.extra.get("direct", True)]
        checks.append(ScenarioCheck(
            "reader never touched the live object",
            len(buffered) == 2, 2, len(buffered)))
    else:
        checks.append(ScenarioCheck("expected events recorded", False,
                                    "all events", "missing"))
    return ScenarioResult("read-only-async", checks, events, finals)


def _scenario_last_write_async() -> ScenarioResult:
    """Pure writes go to the log without waiting; the final write spawns a
    background task that applies the log and releases, while the main flow
    moves on to another object immediately."""
    from .objects import counter_cell, reference_cell as _rc
    k_done = threading.Event()
    h = _ScenarioHarness({"x": _rc(), "y": counter_cell()})

    def t_i():
        session = h.session("ti")
        txn = Transaction(session)
        x = txn.accesses(session.locate("x"), max_reads=1, max_writes=1,
                         max_updates=0)
        h.sequencer.run_in_turn(0, txn.begin)
        h.outcomes["ti_read"] = x.read()
        h.await_event(lambda e: e.kind == hist.INVOKE and e.object_id == "y")
        x.write(1)
        h.outcomes["ti"] = txn.commit()

    def t_j():
        session = h.session("tj")
        txn = Transaction(session)
        x = txn.accesses(session.locate("x"), max_reads=1, max_writes=2,
                         max_updates=0)
        y = txn.updates(session.locate("y"), max_updates=1)
        h.sequencer.run_in_turn(1, txn.begin)
        x.write(2)
        x.write(3)
        y.increment()
        if not k_done.wait(20.0):
            raise TimeoutError("third transaction never finished")
        h.outcomes["tj_read"] = x.read()
        h.outcomes["tj"] = txn.commit()

    def t_k():
        session = h.session("tk")
        txn = Transaction(session)
        x = txn.accesses(session.locate("x"), max_reads=1, max_writes=1,
                         max_updates=0)
        h.sequencer.run_in_turn(2, txn.begin)
        h.outcomes["tk_read"] = x.read()
        x.write(4)
        k_done.set()
        h.outcomes["tk"] = txn.commit()

    for name_, fn in (("ti", t_i), ("tj", t_j), ("tk", t_k)):
        h.spawn(name_, fn)
    hung = h.join_all()
    events, finals = h.finish(["x", "y"])

    checks = [h.liveness_check(hung)]
    tj_txn = h.txn_of(events, "tj")
    tk_txn = h.txn_of(events, "tk")
    y_invoke = _first(events, kind=hist.INVOKE, object_id="y", txn_id=tj_txn)
    first_release = _first(events, kind=hist.RELEASE, object_id="x", pv=1)
    task_release = _first(events, kind=hist.RELEASE, object_id="x", pv=2)
    k_invoke = _first(events, kind=hist.INVOKE, object_id="x", txn_id=tk_txn)
    j_commit = _first(events, kind=hist.COMMIT, txn_id=tj_txn)
    j_writes = [e for e in events if e.kind == hist.RESPONSE and e.txn_id == tj_txn
                and e.object_id == "x" and e.method == "write"]
    checks.append(ScenarioCheck(
        "first transaction read the initial value",
        h.outcomes.get("ti_read") == 0, 0, h.outcomes.get("ti_read")))
    checks.append(ScenarioCheck(
        "logged writes never touched the live object",
        bool(j_writes) and all(not e.extra.get("direct", True) for e in j_writes),
        [False, False], [e.extra.get("direct") for e in j_writes]))
    if y_invoke and first_release and task_release and k_invoke and j_commit:
        checks.append(ScenarioCheck(
            "unrelated update started before the release task's turn arrived",
            y_invoke.seq < first_release.seq, True, y_invoke.seq < first_release.seq))
        checks.append(ScenarioCheck(
            "third transaction reached the object before the log owner committed",
            k_invoke.seq < j_commit.seq, True, k_invoke.seq < j_commit.seq))
        checks.append(ScenarioCheck(
            "third transaction read the fully applied log",
            h.outcomes.get("tk_read") == 3, 3, h.outcomes.get("tk_read")))
        checks.append(ScenarioCheck(
            "log owner's later read returns the scripted expectation (2)",
            h.outcomes.get("tj_read") == 2, 2, h.outcomes.get("tj_read")))
        checks.append(ScenarioCheck(
            "log owner's later read equals its own final write",
            h.outcomes.get("tj_read") == 3, 3, h.outcomes.get("tj_read")))
    else:
        checks.append(ScenarioCheck("expected events recorded", False,
                                    "all events", "missing"))
    return ScenarioResult("last-write-async", checks, events, finals)


_SCENARIOS = {
    "access-control": _scenario_access_control,
    "early-release": _scenario_early_release,
    "cascade": _scenario_cascade,
    "read-only-async": _scenario_read_only_async,
    "last-write-async": _scenario_last_write_async,
}

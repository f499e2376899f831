"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The randomized corpus
(criteria 1, 3, 10) is built once per session. Criterion 5b pins a scripted
expectation that contradicts log-application semantics (see the matching
check in the last-write scenario); it is red by design and documented in the
README.
"""

import random
import subprocess
import sys
import threading
import time

import pytest

from cfdtm.bench import BenchConfig, hosted_objects, run_benchmark, run_scenario
from cfdtm.client import Session, Transaction
from cfdtm.errors import ForcedAbortError
from cfdtm.history import check_serializable, check_version_order
from cfdtm.node import NodeServer
from cfdtm.objects import counter_cell, reference_cell
from cfdtm.transport import LocalCluster, TcpChannel, TcpNodeHost

from workloads import random_plan, run_plan

ALL_ALGORITHMS = ("optsva-cf", "sva", "mutex-s2pl", "mutex-2pl",
                  "rw-s2pl", "rw-2pl", "glock")

CORPUS_SIZE = 10_000
SERIALIZABILITY_PLANS = 1_000
IRREVOCABLE_RUNS = 500
STRESS_SECONDS = 60.0


def report(criterion: str, ok: bool, detail: str = "") -> None:
    line = f"CRITERION {criterion}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" — {detail}"
    print(line, flush=True)
    assert ok, line


@pytest.fixture(scope="session")
def corpus():
    """Criterion-1 corpus: randomized small workloads, manual aborts
    disabled, run on the in-process transport."""
    rng = random.Random(20260808)
    started = time.monotonic()
    violations = 0
    forced = 0
    failures = []
    hung = []
    for i in range(CORPUS_SIZE):
        plan = random_plan(rng, max_txns=5, max_objects=4, max_ops=6)
        run = run_plan(plan, timeout=30.0)
        if run.hung:
            hung.append((i, run.hung))
            continue
        bad = check_version_order(run.events)
        if bad:
            violations += len(bad)
            failures.append((i, bad[:3]))
        for outcome in run.outcomes.values():
            if outcome == "forced":
                forced += 1
            elif outcome != "committed":
                failures.append((i, outcome))
    return {
        "runs": CORPUS_SIZE,
        "seconds": time.monotonic() - started,
        "violations": violations,
        "forced": forced,
        "failures": failures,
        "hung": hung,
    }


def test_criterion_1_version_discipline(corpus):
    ok = (corpus["violations"] == 0 and not corpus["failures"]
          and not corpus["hung"] and corpus["seconds"] < 300.0)
    report("1 (version discipline)", ok,
           f"{corpus['runs']} workloads, {corpus['violations']} violations, "
           f"{corpus['seconds']:.0f}s"
           + (f", failures: {corpus['failures'][:3]}" if corpus["failures"] else ""))


def test_criterion_2_serializability_oracle():
    rng = random.Random(4242)
    started = time.monotonic()
    problems = []
    for i in range(SERIALIZABILITY_PLANS):
        plan = random_plan(rng, max_txns=5, max_objects=4, max_ops=6)
        for algorithm in ALL_ALGORITHMS:
            run = run_plan(plan, algorithm=algorithm, timeout=30.0)
            if run.hung:
                problems.append((i, algorithm, "hung"))
                continue
            result = check_serializable(run.events, run.init_states, run.defs,
                                        final_states=run.final_states)
            if result.status != "serializable":
                problems.append((i, algorithm, result.status, result.detail))
    elapsed = time.monotonic() - started
    ok = not problems and elapsed < 600.0
    report("2 (serializability oracle)", ok,
           f"{SERIALIZABILITY_PLANS} workloads x {len(ALL_ALGORITHMS)} algorithms, "
           f"{elapsed:.0f}s" + (f", problems: {problems[:3]}" if problems else ""))


def test_criterion_3_zero_forced_aborts_without_manual(corpus):
    report("3 (no forced aborts absent manual)", corpus["forced"] == 0,
           f"forced-abort counter = {corpus['forced']} over {corpus['runs']} runs")


def test_criterion_4_cascade_correctness():
    result = run_scenario("cascade")
    wanted = {"exactly one manual abort", "exactly one forced abort",
              "object restored to the aborter's checkpoint",
              "successor's commit came back as a forced abort"}
    checks = {c.description: c.ok for c in result.checks}
    ok = result.passed and wanted <= {d for d, v in checks.items() if v}
    report("4 (cascade correctness)", ok, result.report().replace("\n", "; "))


def test_criterion_5a_read_only_asynchrony():
    result = run_scenario("read-only-async")
    checks = {c.description: c for c in result.checks}
    key = checks["writer's first access started before the reader's first read completed"]
    ok = result.passed and key.ok
    report("5a (read-only asynchrony)", ok, result.report().replace("\n", "; "))


def test_criterion_5b_last_write_asynchrony():
    result = run_scenario("last-write-async")
    checks = {c.description: c for c in result.checks}
    ordering = checks["unrelated update started before the release task's turn arrived"]
    successor_value = checks["third transaction read the fully applied log"]
    # The scripted expectation has the log owner re-reading 2 after writing
    # 2 then 3; log application (which the successor's read of 3 depends on)
    # makes it 3. Asserted as scripted; see README.
    log_owner_value = checks["log owner's later read returns the scripted expectation (2)"]
    ok = ordering.ok and successor_value.ok and log_owner_value.ok
    report("5b (last-write asynchrony)", ok,
           f"ordering={ordering.ok}, successor reads 3={successor_value.ok}, "
           f"log owner reads 2={log_owner_value.ok} (observed "
           f"{log_owner_value.observed})")


def test_criterion_6_irrevocability():
    rng = random.Random(616)
    started = time.monotonic()
    irrevocable_total = 0
    irrevocable_forced = 0
    problems = []
    for i in range(IRREVOCABLE_RUNS):
        plan = random_plan(rng, max_txns=5, max_objects=4, max_ops=6,
                           abort_prob=0.35, irrevocable_prob=0.4)
        if not any(t.irrevocable for t in plan.txns):
            plan.txns[rng.randrange(len(plan.txns))].irrevocable = True
        run = run_plan(plan, timeout=30.0)
        if run.hung:
            problems.append((i, "hung"))
            continue
        for tp in plan.txns:
            if tp.irrevocable:
                irrevocable_total += 1
                if run.outcomes.get(tp.name) == "forced":
                    irrevocable_forced += 1
    ok = irrevocable_forced == 0 and not problems
    report("6 (irrevocability)", ok,
           f"{IRREVOCABLE_RUNS} runs, {irrevocable_total} irrevocable transactions, "
           f"{irrevocable_forced} forced, {time.monotonic() - started:.0f}s")


def _bench_profile(algorithm: str, read_ratio: float, seed: int) -> BenchConfig:
    return BenchConfig(
        nodes=2, clients_per_node=4, algorithm=algorithm, hot_array_size=10,
        mild_array_size=0, cold_array_size=0, ops_hot=10, ops_mild=0,
        ops_cold=0, read_ratio=read_ratio, locality_probability=0.5,
        history_length=5, op_latency_ms=3.0, txns_per_client=4, seed=seed,
        wait_timeout=120.0)


def test_criterion_7_throughput_ordering():
    started = time.monotonic()
    details = []
    ok = True
    for read_ratio in (0.9, 0.1):
        medians = {}
        for algorithm in ("optsva-cf", "sva", "glock"):
            samples = []
            for seed in range(5):
                rep = run_benchmark(_bench_profile(algorithm, read_ratio, 100 + seed))
                assert rep.forced_aborts == 0 and rep.manual_aborts == 0
                samples.append(rep.throughput_ops_s)
            samples.sort()
            medians[algorithm] = samples[len(samples) // 2]
        gap1 = medians["optsva-cf"] / medians["sva"]
        gap2 = medians["sva"] / medians["glock"]
        ok = ok and gap1 >= 1.10 and gap2 >= 1.10
        details.append(f"reads={read_ratio:g}: "
                       + " ".join(f"{a}={medians[a]:.0f}" for a in medians)
                       + f" (ratios {gap1:.2f}, {gap2:.2f})")
    elapsed = time.monotonic() - started
    ok = ok and elapsed < 300.0
    report("7 (throughput ordering)", ok, "; ".join(details) + f"; {elapsed:.0f}s")


VICTIM_SCRIPT = """
import sys, time
from cfdtm.client import Session, Transaction
from cfdtm.transport import TcpChannel

channel = TcpChannel([sys.argv[1]])
session = Session(channel, client_id="victim")
txn = Transaction(session, heartbeat_interval=0.2)
x = txn.updates(session.locate("x"), max_updates=2)
txn.begin()
x.increment()
print("HOLDING", flush=True)
time.sleep(120)
"""


def test_criterion_8_fault_tolerance():
    lease = 2.0
    node = NodeServer("n0", lease_timeout=lease, sweep_interval=0.2)
    node.register("x", counter_cell())
    host = TcpNodeHost(node, "127.0.0.1:0")
    channel = TcpChannel([host.address])
    victim = None
    try:
        victim = subprocess.Popen(
            [sys.executable, "-c", VICTIM_SCRIPT, host.address],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        line = victim.stdout.readline().strip()
        assert line == "HOLDING", victim.stderr.read()
        victim.kill()
        victim.wait(10.0)
        killed_at = time.monotonic()

        session = Session(channel, client_id="successor")
        txn = Transaction(session, heartbeat_interval=0.3)
        x = txn.updates(session.locate("x"), max_updates=1)
        txn.begin()
        value = x.increment()
        outcome = txn.commit()
        recovery = time.monotonic() - killed_at
        ok_kill = outcome.committed and value == 1 and recovery <= lease + 2.0

        # Illusory crash: a client that merely stops heartbeating is rolled
        # back, and its next call is refused with a forced abort.
        lazy_session = Session(channel, client_id="lazy")
        lazy = Transaction(lazy_session, heartbeat_interval=0.2)
        lx = lazy.updates(lazy_session.locate("x"), max_updates=2)
        lazy.begin()
        lx.increment()
        lazy.pause_heartbeats()
        deadline = time.monotonic() + lease * 3 + 2.0
        while time.monotonic() < deadline and node.stats.snapshot()["rollbacks"] < 2:
            time.sleep(0.1)
        lazy.resume_heartbeats()
        try:
            lx.increment()
            ok_resume = False
        except ForcedAbortError:
            ok_resume = True
        report("8 (fault tolerance)", ok_kill and ok_resume,
               f"successor committed {recovery:.1f}s after kill "
               f"(limit {lease + 2.0:.1f}s); resumed client faulted={ok_resume}")
    finally:
        if victim and victim.poll() is None:
            victim.kill()
        channel.close()
        host.close()


def test_criterion_9_transport_transparency():
    def cfg(transport="local", addrs=()):
        return BenchConfig(
            nodes=2, clients_per_node=2, hot_array_size=6, mild_array_size=2,
            cold_array_size=0, ops_hot=6, ops_mild=2, ops_cold=0,
            read_ratio=0.6, locality_probability=0.5, history_length=3,
            op_latency_ms=1.0, txns_per_client=5, seed=77, wait_timeout=60.0,
            transport=transport, node_addrs=list(addrs))

    local_report = run_benchmark(cfg())

    tcp_cfg = cfg("tcp")
    nodes = [NodeServer(f"n{i}") for i in range(2)]
    latency = tcp_cfg.op_latency_ms / 1000.0
    for index, oid in hosted_objects(tcp_cfg):
        nodes[index].register(oid, reference_cell(latency))
    hosts = [TcpNodeHost(n, "127.0.0.1:0") for n in nodes]
    try:
        tcp_report = run_benchmark(cfg("tcp", [h.address for h in hosts]))
    finally:
        for h in hosts:
            h.close()
    identical = local_report.read_payloads == tcp_report.read_payloads
    clean = (local_report.forced_aborts == tcp_report.forced_aborts == 0)
    report("9 (transport transparency)", identical and clean,
           f"{sum(len(v) for v in local_report.read_payloads.values())} read payloads "
           f"per transport, identical={identical}")


def test_criterion_10_deadlock_freedom(corpus):
    ok_corpus = not corpus["hung"]
    deadline = time.monotonic() + STRESS_SECONDS
    cluster = LocalCluster(1, wait_timeout=45.0)
    for oid in ("x", "y"):
        cluster.register(0, oid, counter_cell())
    channel = cluster.channel()
    cluster.recorder.enabled = False
    completed = [0]
    problems = []
    lock = threading.Lock()

    def hammer(name, seed):
        rng = random.Random(seed)
        session = Session(channel, client_id=name)
        while time.monotonic() < deadline:
            txn = Transaction(session)
            objs = ["x", "y"] if rng.random() < 0.8 else [rng.choice(["x", "y"])]
            stubs = {}
            counts = {oid: rng.randint(1, 3) for oid in objs}
            for oid in objs:
                stubs[oid] = txn.updates(session.locate(oid),
                                         max_updates=counts[oid])
            try:
                txn.begin()
                for oid in objs:
                    for _ in range(counts[oid]):
                        stubs[oid].increment()
                if rng.random() < 0.2:
                    txn.abort()
                else:
                    txn.commit()
            except ForcedAbortError:
                pass
            except Exception as exc:  # noqa: BLE001
                with lock:
                    problems.append(f"{name}: {exc!r}")
                return
            with lock:
                completed[0] += 1

    threads = [threading.Thread(target=hammer, args=(f"s{i}", i), name=f"s{i}")
               for i in range(6)]
    started = time.monotonic()
    for t in threads:
        t.start()
    hung = []
    for t in threads:
        t.join(STRESS_SECONDS + 60.0)
        if t.is_alive():
            hung.append(t.name)
    elapsed = time.monotonic() - started
    if not hung:
        cluster.close()
    ok = ok_corpus and not hung and not problems and completed[0] > 0
    report("10 (deadlock freedom)", ok,
           f"corpus hung={len(corpus['hung'])}; stress: {completed[0]} transactions "
           f"in {elapsed:.0f}s, hung={hung}, problems={problems[:2]}")

"""Randomized small-workload harness shared by the unit and acceptance tests.

A plan is a handful of transactions over a handful of counter cells, with
exact or unbounded call declarations, optional manual aborts, and optional
irrevocable flags. Running a plan spins up a fresh in-process cluster, runs
every transaction on its own thread under a watchdog, and returns everything
the offline checkers need: the recorded history, per-transaction outcomes,
and initial/final object states.
"""

import random
import threading
from dataclasses import dataclass, field

from cfdtm.client import Session, Transaction
from cfdtm.errors import ForcedAbortError, WatchdogTimeoutError
from cfdtm.objects import counter_cell
from cfdtm.transport import LocalCluster

_METHOD_SLOT = {"read": 0, "write": 1, "increment": 2}


@dataclass
class TxnPlan:
    name: str
    ops: list                   # (object_id, method, args)
    declared: dict              # object_id -> (max_reads, max_writes, max_updates)
    manual_abort: bool = False
    irrevocable: bool = False


@dataclass
class WorkloadPlan:
    objects: list
    txns: list
    value_writers: dict = field(default_factory=dict)   # unique value -> txn name


def random_plan(rng: random.Random, max_txns: int = 5, max_objects: int = 4,
                max_ops: int = 6, abort_prob: float = 0.0,
                irrevocable_prob: float = 0.0, unbounded_prob: float = 0.25,
                slack_prob: float = 0.15,
                methods: tuple = ("read", "write", "increment"),
                unique_values: bool = False) -> WorkloadPlan:
    objects = [f"o{i}" for i in range(rng.randint(1, max_objects))]
    plan = WorkloadPlan(objects, [])
    next_value = 1
    for t in range(rng.randint(1, max_txns)):
        ops = []
        counts: dict = {}
        for _ in range(rng.randint(1, max_ops)):
            oid = rng.choice(objects)
            method = rng.choice(methods)
            if method == "write":
                if unique_values:
                    value = next_value
                    next_value += 1
                    plan.value_writers[value] = f"t{t}"
                else:
                    value = rng.randrange(100)
                ops.append((oid, "write", (value,)))
            else:
                ops.append((oid, method, ()))
            counts.setdefault(oid, [0, 0, 0])[_METHOD_SLOT[method]] += 1
        declared = {}
        for oid, slots in counts.items():
            roll = rng.random()
            if roll < unbounded_prob:
                declared[oid] = (None, None, None)
            elif roll < unbounded_prob + slack_prob:
                # Over-declared bounds are legal; they just delay release.
                # All-read objects sometimes become unbounded read-only.
                if slots[1] == slots[2] == 0 and rng.random() < 0.5:
                    declared[oid] = (None, 0, 0)
                else:
                    declared[oid] = tuple(s + rng.randint(1, 2) for s in slots)
            else:
                declared[oid] = tuple(slots)
        plan.txns.append(TxnPlan(
            name=f"t{t}", ops=ops, declared=declared,
            manual_abort=rng.random() < abort_prob,
            irrevocable=rng.random() < irrevocable_prob))
    return plan


@dataclass
class WorkloadRun:
    events: list
    outcomes: dict              # plan txn name -> "committed"|"manual"|"forced"|error repr
    init_states: dict
    final_states: dict
    defs: dict
    hung: list


def run_plan(plan: WorkloadPlan, algorithm: str = "optsva-cf", nodes: int = 2,
             timeout: float = 30.0) -> WorkloadRun:
    cluster = LocalCluster(min(nodes, len(plan.objects)) or 1,
                           wait_timeout=timeout)
    defs = {}
    n_nodes = len(cluster.nodes)
    for i, oid in enumerate(plan.objects):
        cluster.register(i % n_nodes, oid, counter_cell())
        defs[oid] = counter_cell()
    channel = cluster.channel()
    boot = Session(channel, client_id="boot")
    init_states = {oid: boot.peek_state(boot.locate(oid)) for oid in plan.objects}

    outcomes: dict = {}
    lock = threading.Lock()

    def run_txn(tp: TxnPlan) -> None:
        session = Session(channel, recorder=cluster.recorder, client_id=tp.name)
        txn = Transaction(session, algorithm=algorithm, irrevocable=tp.irrevocable)
        stubs = {oid: txn.accesses(session.locate(oid), *decl)
                 for oid, decl in tp.declared.items()}
        result = "committed"
        try:
            txn.begin()
            for oid, method, args in tp.ops:
                getattr(stubs[oid], method)(*args)
            if tp.manual_abort:
                txn.abort()
                result = "manual"
            else:
                out = txn.commit()
                if not out.committed:
                    result = "forced" if out.forced else "manual"
        except ForcedAbortError:
            result = "forced"
        except WatchdogTimeoutError as exc:
            result = f"watchdog: {exc}"
        except Exception as exc:  # noqa: BLE001 - surfaced by the caller
            result = f"error: {exc!r}"
        with lock:
            outcomes[tp.name] = result

    threads = [threading.Thread(target=run_txn, args=(tp,), name=tp.name)
               for tp in plan.txns]
    for thread in threads:
        thread.start()
    hung = []
    for thread in threads:
        thread.join(timeout)
        if thread.is_alive():
            hung.append(thread.name)

    final_states = {} if hung else \
        {oid: boot.peek_state(boot.locate(oid)) for oid in plan.objects}
    events = cluster.recorder.snapshot()
    if not hung:
        cluster.close()
    return WorkloadRun(events, outcomes, init_states, final_states, defs, hung)


def reads_from_violations(plan: WorkloadPlan, run: WorkloadRun) -> list:
    """Value-based reads-from analysis for unique-value plans: no committed
    transaction may have read a value written by an aborted transaction, and
    no aborted transaction's value may survive into the final state."""
    aborted = {name for name, outcome in run.outcomes.items()
               if outcome in ("manual", "forced")}
    committed = {name for name, outcome in run.outcomes.items()
                 if outcome == "committed"}
    violations = []
    for event in run.events:
        if event.kind != "RESPONSE" or event.method != "read":
            continue
        name = event.txn_id.split(".", 1)[0]
        writer = plan.value_writers.get(event.payload)
        if name in committed and writer in aborted:
            violations.append(
                f"{name} committed after reading {event.payload} written by aborted {writer}")
    for oid, state in run.final_states.items():
        writer = plan.value_writers.get(state.get("value"))
        if writer in aborted:
            violations.append(
                f"{oid} final value {state['value']} leaked from aborted {writer}")
    return violations

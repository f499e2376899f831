"""Home-node request handling.

A node hosts shared objects and everything that guards them: version
counters, per-transaction proxies, the lock table for the lock baselines,
and leases. All transports deliver the same (kind, body) requests to
NodeServer.handle and get back a (REPLY, body) or (FAULT, body) pair, so the
in-process and TCP paths share every semantic.

Fault tolerance: when leases are enabled, each client transaction must
heartbeat; a transaction whose lease expires has its proxies rolled back
(state restored, versions passed on) as soon as each object's termination
turn arrives. A client that resumes after such a rollback gets a fault on
its next request and must abort.
"""

import threading
import time
from typing import Optional

from . import wire
from .baselines import (
    GLOBAL_LOCK_ID,
    LockProxy,
    LockTable,
    SvaProxy,
)
from .engine import HostedObject, NodeTxn, OptSvaProxy, Suprema
from .errors import (
    CfdtmError,
    DuplicateObjectError,
    ForcedAbortError,
    InvariantViolationError,
    LockProtocolError,
    MisclassifiedOperationError,
    StateCopyError,
    SupremumExceededError,
    UnknownMethodError,
    UnknownObjectError,
    WatchdogTimeoutError,
)
from .executor import ConditionExecutor
from .history import RELEASE, Recorder
from .objects import SharedObjectDef


class NodeStats:
    def __init__(self):
        self._lock = threading.Lock()
        self.wait_seconds = 0.0
        self.invocations = 0
        self.rollbacks = 0

    def add_wait(self, seconds: float) -> None:
        with self._lock:
            self.wait_seconds += seconds

    def bump_invocations(self) -> None:
        with self._lock:
            self.invocations += 1

    def snapshot(self) -> dict:
        with self._lock:
            return {"wait_seconds": self.wait_seconds,
                    "invocations": self.invocations,
                    "rollbacks": self.rollbacks}


class NodeServer:
    def __init__(self, node_id: str,
                 executor: Optional[ConditionExecutor] = None,
                 recorder: Optional[Recorder] = None,
                 wait_timeout: Optional[float] = None,
                 lease_timeout: Optional[float] = None,
                 sweep_interval: float = 0.5):
        self.node_id = node_id
        self.executor = executor or ConditionExecutor()
        self._own_executor = executor is None
        self.recorder = recorder or Recorder(virtual_clock=False, node_id=node_id)
        self.wait_timeout = wait_timeout
        self.lease_timeout = lease_timeout
        self.sweep_interval = sweep_interval
        self.stats = NodeStats()

        self.objects: dict[str, HostedObject] = {}
        self.node_txns: dict[str, NodeTxn] = {}
        self.proxies: dict[tuple[str, str], object] = {}
        self.locks = LockTable()
        self.leases: dict[str, float] = {}
        # Versions granted but not yet owned by a proxy; a transaction dying
        # in that window must not wedge the version chain.
        self.grants: dict[str, list[tuple[str, int]]] = {}
        self._lock = threading.Lock()
        self._sweeper: Optional[threading.Thread] = None
        self._closed = threading.Event()
        if lease_timeout:
            self._sweeper = threading.Thread(
                target=self._sweep_loop, name=f"{node_id}-leases", daemon=True)
            self._sweeper.start()

    # -- hosting ---------------------------------------------------------------

    def register(self, object_id: str, def_: SharedObjectDef,
                 initial_state: Optional[dict] = None) -> HostedObject:
        with self._lock:
            if object_id in self.objects:
                raise DuplicateObjectError(f"{object_id} already hosted on {self.node_id}")
            state = dict(initial_state) if initial_state is not None else def_.initial_state()
            hosted = HostedObject(object_id, def_, state, self.node_id)
            hosted.versions.add_hook(self.executor.on_counter_change)
            hosted.versions.stats = self.stats  # wait-time accounting
            self.objects[object_id] = hosted
            return hosted

    def hosted(self, object_id: str) -> HostedObject:
        try:
            return self.objects[object_id]
        except KeyError:
            raise UnknownObjectError(f"{object_id} is not hosted on {self.node_id}") from None

    def close(self) -> None:
        self._closed.set()
        if self._own_executor:
            self.executor.close()

    # -- dispatch ---------------------------------------------------------------

    def handle(self, kind: int, body: dict) -> tuple[int, dict]:
        try:
            if kind == wire.LOCATE:
                return wire.REPLY, self._locate(body)
            if kind == wire.OPEN_PROXY:
                return wire.REPLY, self._open_proxy(body)
            if kind == wire.INVOKE:
                return wire.REPLY, self._invoke(body)
            if kind == wire.TXN_CTRL:
                return wire.REPLY, self._txn_ctrl(body)
            if kind == wire.HEARTBEAT:
                self._refresh_lease(body["txn_id"])
                return wire.REPLY, {}
            return wire.FAULT, {"code": "protocol", "message": f"unknown kind {kind}"}
        except ForcedAbortError as exc:
            return wire.FAULT, {"code": "forced_abort", "message": str(exc)}
        except SupremumExceededError as exc:
            self._doom(body.get("txn_id"), f"call bound violated: {exc}")
            return wire.FAULT, {"code": "supremum", "message": str(exc)}
        except MisclassifiedOperationError as exc:
            self._doom(body.get("txn_id"), f"misclassified operation: {exc}")
            return wire.FAULT, {"code": "misclassified", "message": str(exc)}
        except StateCopyError as exc:
            self._doom(body.get("txn_id"), f"state copy failed: {exc}")
            return wire.FAULT, {"code": "state_copy", "message": str(exc)}
        except UnknownObjectError as exc:
            return wire.FAULT, {"code": "unknown_object", "message": str(exc)}
        except UnknownMethodError as exc:
            return wire.FAULT, {"code": "unknown_method", "message": str(exc)}
        except LockProtocolError as exc:
            return wire.FAULT, {"code": "lock_protocol", "message": str(exc)}
        except WatchdogTimeoutError as exc:
            return wire.FAULT, {"code": "watchdog", "message": str(exc)}
        except InvariantViolationError as exc:
            return wire.FAULT, {"code": "invariant", "message": str(exc)}
        except CfdtmError as exc:
            return wire.FAULT, {"code": "internal", "message": str(exc)}

    def _doom(self, txn_id: Optional[str], reason: str) -> None:
        if txn_id is None:
            return
        with self._lock:
            txn = self.node_txns.get(txn_id)
        if txn is not None:
            txn.mark_doomed(reason)

    # -- handlers ------------------------------------------------------------------

    def _locate(self, body: dict) -> dict:
        self.hosted(body["object_id"])
        return {"home": self.node_id}

    def _node_txn(self, body: dict) -> NodeTxn:
        txn_id = body["txn_id"]
        with self._lock:
            txn = self.node_txns.get(txn_id)
            if txn is None:
                txn = NodeTxn(txn_id,
                              irrevocable=bool(body.get("irrevocable")),
                              algorithm=body.get("algorithm", "optsva-cf"))
                self.node_txns[txn_id] = txn
            return txn

    def _open_proxy(self, body: dict) -> dict:
        txn = self._node_txn(body)
        if txn.doomed or txn.abort_event.is_set():
            raise ForcedAbortError("transaction was rolled back before the proxy opened")
        hosted = self.hosted(body["object_id"])
        key = (txn.txn_id, hosted.object_id)
        self._refresh_lease(txn.txn_id)
        methods = {name: spec.op_class.value
                   for name, spec in hosted.def_.methods.items()}
        with self._lock:
            grants = self.grants.get(txn.txn_id)
            if grants is not None:
                # The proxy takes over the grant's termination duty.
                entry = (hosted.object_id, body.get("pv", 0))
                if entry in grants:
                    grants.remove(entry)
                if not grants:
                    self.grants.pop(txn.txn_id, None)
            if key in self.proxies:
                return {"existing": True, "methods": methods}
            if txn.algorithm == "optsva-cf":
                proxy = OptSvaProxy(hosted, txn, body["pv"],
                                    Suprema.from_wire(body.get("suprema", {})),
                                    self.executor, self.wait_timeout,
                                    on_release=self._record_release)
            elif txn.algorithm == "sva":
                proxy = SvaProxy(hosted, txn, body["pv"],
                                 Suprema.from_wire(body.get("suprema", {})),
                                 self.executor, self.wait_timeout,
                                 on_release=self._record_release)
            else:
                proxy = LockProxy(hosted, txn,
                                  take_checkpoint=txn.algorithm != "glock")
            self.proxies[key] = proxy
            txn.proxies.append(proxy)
            return {"existing": False, "methods": methods}

    def _record_release(self, txn_id: str, object_id: str, pv: int) -> None:
        self.recorder.record(RELEASE, txn_id, object_id=object_id, pv=pv,
                             node_id=self.node_id)

    def _proxy(self, body: dict):
        key = (body["txn_id"], body["object_id"])
        with self._lock:
            proxy = self.proxies.get(key)
        if proxy is None:
            raise UnknownObjectError(
                f"no proxy for {key[1]} under transaction {key[0]} on {self.node_id}")
        return proxy

    def _invoke(self, body: dict) -> dict:
        proxy = self._proxy(body)
        self._refresh_lease(body["txn_id"])
        self.stats.bump_invocations()
        had_direct = getattr(proxy, "accessed_directly", True)
        payload, direct = proxy.invoke(body["method"], tuple(body.get("args", ())))
        return {
            "payload": payload,
            "direct": direct,
            "first_direct": bool(direct and not had_direct),
            "doomed": proxy.txn.doomed,
        }

    def _txn_ctrl(self, body: dict) -> dict:
        op = body["op"]
        if op == "version_lock":
            self._refresh_lease(body["txn_id"])
            self.hosted(body["object_id"]).versions.lock_grant(
                body["txn_id"], timeout=self.wait_timeout)
            return {}
        if op == "version_assign":
            pvs = {oid: self.hosted(oid).versions.grant_next(body["txn_id"])
                   for oid in body["object_ids"]}
            with self._lock:
                self.grants.setdefault(body["txn_id"], []).extend(pvs.items())
            return {"pvs": pvs}
        if op == "version_unlock":
            self.hosted(body["object_id"]).versions.unlock_grant(body["txn_id"])
            return {}
        if op == "prepare_commit":
            return {"doomed": self._proxy(body).prepare_terminate(for_commit=True)}
        if op == "finalize_commit":
            self._proxy(body).finalize_commit()
            self._decommission(body)
            return {}
        if op == "signal_abort":
            return self._signal_abort(body)
        if op == "abandon_txn":
            # Client-side begin failed partway; retire everything this
            # transaction holds here exactly as a lease expiry would.
            self._roll_back_txn(body["txn_id"])
            return {}
        if op == "abort_object":
            proxy = self._proxy(body)
            proxy.prepare_terminate(for_commit=False)
            proxy.finalize_abort()
            self._decommission(body)
            return {}
        if op == "lock":
            self._refresh_lease(body["txn_id"])
            self._node_txn(body)
            lock = self.locks.lock_for(body["object_id"])
            if body["object_id"] != GLOBAL_LOCK_ID:
                self.hosted(body["object_id"])
            lock.acquire(body["txn_id"], exclusive=body.get("exclusive", True),
                         timeout=self.wait_timeout)
            return {}
        if op == "unlock":
            self.locks.lock_for(body["object_id"]).release(body["txn_id"])
            return {}
        if op == "lock_restore":
            self._proxy(body).restore_on_abort()
            return {}
        if op == "query_doom":
            proxy = self._proxy(body)
            with proxy.hosted.guard:
                doomed = (proxy.txn.doomed or
                          proxy.hosted.recovery.is_tainted(proxy.pv,
                                                           proxy.consumed_epoch))
            return {"doomed": doomed}
        if op == "peek_state":
            hosted = self.hosted(body["object_id"])
            with hosted.guard:
                return {"state": dict(hosted.state), "kind": hosted.def_.kind}
        if op == "node_stats":
            return self.stats.snapshot()
        if op == "dump_history":
            return {"events": [e.to_dict() for e in self.recorder.snapshot()]}
        raise InvariantViolationError(f"unknown control op {op!r}")

    def _signal_abort(self, body: dict) -> dict:
        with self._lock:
            txn = self.node_txns.get(body["txn_id"])
        if txn is None:
            return {}
        txn.abort_event.set()
        for proxy in list(txn.proxies):
            proxy.hosted.versions.notify_waiters()
        return {}

    def _decommission(self, body: dict) -> None:
        key = (body["txn_id"], body["object_id"])
        with self._lock:
            self.proxies.pop(key, None)
            txn = self.node_txns.get(body["txn_id"])
            if txn is not None and not any(k[0] == body["txn_id"] for k in self.proxies):
                self.node_txns.pop(body["txn_id"], None)
                self.leases.pop(body["txn_id"], None)
                self.grants.pop(body["txn_id"], None)

    # -- leases -------------------------------------------------------------------

    def _refresh_lease(self, txn_id: str) -> None:
        if self.lease_timeout:
            with self._lock:
                self.leases[txn_id] = time.monotonic() + self.lease_timeout

    def _sweep_loop(self) -> None:
        while not self._closed.wait(self.sweep_interval):
            now = time.monotonic()
            with self._lock:
                expired = [t for t, deadline in self.leases.items() if deadline < now]
            for txn_id in expired:
                self._roll_back_txn(txn_id)

    def _roll_back_txn(self, txn_id: str) -> None:
        """Lease expired: fault all future requests, wake any waiters, then
        retire each proxy at its termination turn via the executor."""
        with self._lock:
            txn = self.node_txns.get(txn_id)
            self.leases.pop(txn_id, None)
            proxies = list(txn.proxies) if txn else []
            orphan_grants = self.grants.pop(txn_id, [])
        # A client can die holding only acquisition-time resources, before any
        # proxy exists; those must come back regardless.
        for hosted in self.objects.values():
            hosted.versions.force_unlock_grant(txn_id)
        self.locks.force_release_all(txn_id)
        for oid, pv in orphan_grants:
            self._schedule_orphan_finalize(txn_id, oid, pv)
        if txn is None:
            return
        self.stats.rollbacks += 1
        txn.mark_doomed("lease expired")
        txn.abort_event.set()
        for proxy in proxies:
            proxy.hosted.versions.notify_waiters()
            if isinstance(proxy, LockProxy):
                proxy.restore_on_abort()
                continue
            proxy.rolled_back = True
            task = proxy.release_task
            if task is not None and not task.done():
                self.executor.cancel_parked(task)
            versions = proxy.hosted.versions
            self.executor.submit(
                proxy.hosted.object_id,
                lambda pv=proxy.pv, v=versions: v.terminated_version >= pv - 1,
                proxy.roll_back_self,
                txn_id=txn_id,
            )

    def _schedule_orphan_finalize(self, txn_id: str, object_id: str, pv: int) -> None:
        """A version granted to a transaction that never opened its proxy:
        pass the turn on (releasing if needed) once it arrives, so successors
        are not wedged forever."""
        hosted = self.objects.get(object_id)
        if hosted is None:
            return
        versions = hosted.versions

        def finalize():
            with hosted.guard:
                if versions.terminated_version >= pv:
                    return
                lv, _ = versions.snapshot()
                if lv < pv:
                    self._record_release(txn_id, object_id, pv)
                versions.mark_terminated(pv)

        self.executor.submit(object_id,
                             lambda: versions.terminated_version >= pv - 1,
                             finalize, txn_id=txn_id)

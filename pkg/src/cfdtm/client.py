"""Client-side transaction API.

Usage mirrors remote-object programming: locate references, declare how the
transaction will use each one (reads / writes / updates / accesses, with
optional call bounds), then run the body. Declarations return stubs whose
method calls travel to the object's home node, where all concurrency control
and all side effects happen; stubs stay valid across retries because they
route through the transaction's current attempt.

    session = Session(channel)
    txn = Transaction(session)
    a = txn.accesses(session.locate("A"), max_reads=1, max_updates=1)
    b = txn.updates(session.locate("B"), max_updates=1)

    def body(t):
        a.withdraw(100)
        b.deposit(100)
        if a.balance() < 0:
            t.abort()

    outcome = txn.start(body)
"""

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from . import history, wire
from .baselines import (
    GLOBAL_LOCK_ID,
    LOCK_ALGORITHMS,
    VERSIONED_ALGORITHMS,
    unlocks_early,
    uses_read_locks,
)
from .engine import Suprema
from .errors import (
    ForcedAbortError,
    ManualAbortRequested,
    RetryExhaustedError,
    RetryRequested,
    TransactionStateError,
    UnknownObjectError,
)
from .transport import Channel


@dataclass(frozen=True)
class RemoteRef:
    object_id: str
    home: str


class Session:
    """A client's connection to the cluster: locates objects and hands out
    transaction ids. One session may run many transactions."""

    _ids = itertools.count(1)

    def __init__(self, channel: Channel, recorder: Optional[history.Recorder] = None,
                 client_id: Optional[str] = None):
        self.channel = channel
        self.recorder = recorder or history.Recorder(virtual_clock=False, node_id="client")
        self.client_id = client_id or f"c{next(Session._ids)}"
        self._locations: dict[str, str] = {}
        self._txn_counter = itertools.count(1)

    def locate(self, object_id: str) -> RemoteRef:
        home = self._locations.get(object_id)
        if home is None:
            for addr in self.channel.addresses():
                try:
                    self.channel.request(addr, wire.LOCATE, {"object_id": object_id})
                except UnknownObjectError:
                    continue
                home = addr
                break
            if home is None:
                raise UnknownObjectError(f"no node hosts {object_id}")
            self._locations[object_id] = home
        return RemoteRef(object_id, home)

    # test/benchmark introspection -------------------------------------------------

    def peek_state(self, ref: RemoteRef) -> dict:
        reply = self.channel.request(ref.home, wire.TXN_CTRL,
                                     {"op": "peek_state", "object_id": ref.object_id,
                                      "txn_id": "?"})
        return reply["state"]

    def node_stats(self) -> dict:
        totals: dict = {}
        for addr in self.channel.addresses():
            stats = self.channel.request(addr, wire.TXN_CTRL,
                                         {"op": "node_stats", "txn_id": "?"})
            for key, value in stats.items():
                totals[key] = totals.get(key, 0) + value
        return totals


@dataclass
class TransactionOutcome:
    status: str                  # "committed" | "aborted"
    forced: bool = False
    reason: str = ""
    attempts: int = 1

    @property
    def committed(self) -> bool:
        return self.status == "committed"


@dataclass
class _Declaration:
    ref: RemoteRef
    suprema: Suprema


class _Stub:
    """Callable facade for one declared object inside one transaction."""

    __slots__ = ("_txn", "_ref")

    def __init__(self, txn: "Transaction", ref: RemoteRef):
        self._txn = txn
        self._ref = ref

    def __getattr__(self, method: str) -> Callable:
        return lambda *args: self._txn._invoke(self._ref, method, args)


class Transaction:
    def __init__(self, session: Session, irrevocable: bool = False,
                 algorithm: str = "optsva-cf", max_retries: int = 0,
                 auto_retry: bool = False,
                 heartbeat_interval: Optional[float] = None):
        if algorithm not in VERSIONED_ALGORITHMS + LOCK_ALGORITHMS:
            raise ValueError(f"unknown algorithm {algorithm!r}")
        self.session = session
        self.irrevocable = irrevocable
        self.algorithm = algorithm
        self.max_retries = max_retries
        self.auto_retry = auto_retry
        self.heartbeat_interval = heartbeat_interval

        self._base_id = f"{session.client_id}.t{next(session._txn_counter)}"
        self._attempt = 0
        self._declarations: dict[str, _Declaration] = {}
        self._methods: dict[str, dict] = {}
        self.state = "new"
        self.pvs: dict[str, int] = {}
        self._lock_counts: dict[str, int] = {}
        self._held_locks: set[str] = set()
        self._hb_stop: Optional[threading.Event] = None
        self._hb_paused = threading.Event()
        self._body_depth = 0

    @property
    def txn_id(self) -> str:
        return f"{self._base_id}a{self._attempt}" if self._attempt else self._base_id

    # -- declarations ------------------------------------------------------------

    def reads(self, ref: RemoteRef, max_reads: Optional[int] = None) -> _Stub:
        return self._declare(ref, Suprema(max_reads, 0, 0))

    def writes(self, ref: RemoteRef, max_writes: Optional[int] = None) -> _Stub:
        return self._declare(ref, Suprema(0, max_writes, 0))

    def updates(self, ref: RemoteRef, max_updates: Optional[int] = None) -> _Stub:
        return self._declare(ref, Suprema(0, 0, max_updates))

    def accesses(self, ref: RemoteRef, max_reads: Optional[int] = None,
                 max_writes: Optional[int] = None,
                 max_updates: Optional[int] = None) -> _Stub:
        return self._declare(ref, Suprema(max_reads, max_writes, max_updates))

    def _declare(self, ref: RemoteRef, suprema: Suprema) -> _Stub:
        if self.state not in ("new",):
            raise TransactionStateError("declarations must precede begin()")
        if ref.object_id in self._declarations:
            raise TransactionStateError(f"{ref.object_id} declared twice")
        self._declarations[ref.object_id] = _Declaration(ref, suprema)
        return _Stub(self, ref)

    # -- lifecycle -------------------------------------------------------------------

    def begin(self) -> None:
        if self.state != "new":
            raise TransactionStateError(f"begin() in state {self.state}")
        decls = self._declarations
        self.session.recorder.record(
            history.BEGIN, self.txn_id,
            extra={"declared": sorted(decls),
                   "irrevocable": self.irrevocable,
                   "algorithm": self.algorithm})
        try:
            if self.algorithm in VERSIONED_ALGORITHMS:
                self._acquire_versions()
                self._open_proxies()
            else:
                # Proxies first: they establish the per-node transaction
                # record (and its algorithm) before any lock request arrives.
                self.session.recorder.record(history.ACQUIRE, self.txn_id,
                                             extra={"pvs": {}})
                self._open_proxies()
                self._acquire_locks()
        except BaseException:
            # Partial begin: granted versions, opened proxies, or held locks
            # must not outlive the failure, or successors wedge on them.
            self._abandon_partial_begin()
            raise
        self.state = "active"
        self._start_heartbeats()

    def _abandon_partial_begin(self) -> None:
        for home in {d.ref.home for d in self._ordered()}:
            try:
                self._request(home, wire.TXN_CTRL,
                              {"op": "abandon_txn", "txn_id": self.txn_id})
            except Exception:
                pass  # unreachable node: its lease sweep finishes the job
        self.session.recorder.record(history.ABORT, self.txn_id,
                                     extra={"mode": "manual",
                                            "reason": "begin failed"})
        self.state = "aborted"

    def _ordered(self) -> list[_Declaration]:
        return [self._declarations[oid] for oid in sorted(self._declarations)]

    def _request(self, addr: str, kind: int, body: dict) -> dict:
        return self.session.channel.request(addr, kind, body)

    def _acquire_versions(self) -> None:
        ordered = self._ordered()
        locked: list[_Declaration] = []
        try:
            for decl in ordered:
                self._request(decl.ref.home, wire.TXN_CTRL,
                              {"op": "version_lock", "txn_id": self.txn_id,
                               "object_id": decl.ref.object_id})
                locked.append(decl)
            pvs: dict[str, int] = {}
            by_home: dict[str, list[str]] = {}
            for decl in ordered:
                by_home.setdefault(decl.ref.home, []).append(decl.ref.object_id)
            for home, oids in by_home.items():
                reply = self._request(home, wire.TXN_CTRL,
                                      {"op": "version_assign", "txn_id": self.txn_id,
                                       "object_ids": oids})
                pvs.update(reply["pvs"])
        finally:
            for decl in locked:
                self._request(decl.ref.home, wire.TXN_CTRL,
                              {"op": "version_unlock", "txn_id": self.txn_id,
                               "object_id": decl.ref.object_id})
        self.pvs = pvs
        self.session.recorder.record(history.ACQUIRE, self.txn_id, extra={"pvs": pvs})

    def _open_proxies(self) -> None:
        for decl in self._ordered():
            reply = self._request(decl.ref.home, wire.OPEN_PROXY, {
                "txn_id": self.txn_id,
                "object_id": decl.ref.object_id,
                "algorithm": self.algorithm,
                "irrevocable": self.irrevocable,
                "pv": self.pvs.get(decl.ref.object_id, 0),
                "suprema": decl.suprema.to_wire(),
            })
            if "methods" in reply:
                self._methods[decl.ref.object_id] = reply["methods"]

    def _acquire_locks(self) -> None:
        if self.algorithm == "glock":
            home = self.session.channel.addresses()[0]
            self._request(home, wire.TXN_CTRL,
                          {"op": "lock", "txn_id": self.txn_id,
                           "algorithm": self.algorithm,
                           "object_id": GLOBAL_LOCK_ID, "exclusive": True})
            self._held_locks.add(GLOBAL_LOCK_ID)
            return
        for decl in self._ordered():
            exclusive = not (uses_read_locks(self.algorithm) and decl.suprema.read_only)
            self._request(decl.ref.home, wire.TXN_CTRL,
                          {"op": "lock", "txn_id": self.txn_id,
                           "algorithm": self.algorithm,
                           "object_id": decl.ref.object_id, "exclusive": exclusive})
            self._held_locks.add(decl.ref.object_id)
            self._lock_counts[decl.ref.object_id] = 0

    # -- operations ---------------------------------------------------------------------

    def _invoke(self, ref: RemoteRef, method: str, args: tuple):
        if self.state != "active":
            raise TransactionStateError(f"operation in state {self.state}")
        op_class = self._methods.get(ref.object_id, {}).get(method)
        self.session.recorder.record(
            history.INVOKE, self.txn_id, object_id=ref.object_id, method=method,
            op_class=op_class, args=list(args))
        try:
            reply = self._request(ref.home, wire.INVOKE, {
                "txn_id": self.txn_id, "object_id": ref.object_id,
                "method": method, "args": list(args)})
        except ForcedAbortError as exc:
            self.session.recorder.record(
                history.RESPONSE, self.txn_id, object_id=ref.object_id,
                method=method, extra={"error": "forced"})
            self._finalize_abort("forced", str(exc))
            raise
        self.session.recorder.record(
            history.RESPONSE, self.txn_id, object_id=ref.object_id, method=method,
            payload=reply["payload"],
            extra={"direct": reply.get("direct", True),
                   "first_direct": reply.get("first_direct", False)})
        if reply.get("doomed"):
            self._finalize_abort("forced", "invalidated access set")
            raise ForcedAbortError("invalidated access set")
        self._maybe_unlock_early(ref)
        return reply["payload"]

    def _maybe_unlock_early(self, ref: RemoteRef) -> None:
        if self.algorithm not in LOCK_ALGORITHMS or not unlocks_early(self.algorithm):
            return
        oid = ref.object_id
        if oid not in self._held_locks:
            return
        self._lock_counts[oid] += 1
        bound = self._declarations[oid].suprema.total
        if bound is not None and self._lock_counts[oid] >= bound:
            self.unlock_early(ref)

    def is_doomed(self) -> bool:
        """Side-effect-free doom probe over the whole declared set: true iff
        some consumed object was invalidated by a lower-versioned abort. The
        authoritative check still happens at commit."""
        if self.state != "active" or self.algorithm not in VERSIONED_ALGORITHMS:
            return False
        for decl in self._ordered():
            reply = self._request(decl.ref.home, wire.TXN_CTRL,
                                  {"op": "query_doom", "txn_id": self.txn_id,
                                   "object_id": decl.ref.object_id})
            if reply.get("doomed"):
                return True
        return False

    def unlock_early(self, ref: RemoteRef) -> None:
        """Drop one object's lock before commit (non-strict variants only)."""
        if not unlocks_early(self.algorithm):
            raise TransactionStateError(f"{self.algorithm} holds locks until the end")
        if ref.object_id not in self._held_locks:
            from .errors import LockProtocolError
            raise LockProtocolError(f"{ref.object_id} already unlocked")
        self._request(ref.home, wire.TXN_CTRL,
                      {"op": "unlock", "txn_id": self.txn_id,
                       "object_id": ref.object_id})
        self._held_locks.discard(ref.object_id)

    # -- termination ------------------------------------------------------------------------

    def commit(self) -> TransactionOutcome:
        if self.state != "active":
            raise TransactionStateError(f"commit() in state {self.state}")
        if self.algorithm in VERSIONED_ALGORITHMS:
            doomed = False
            reason = ""
            for decl in self._ordered():
                try:
                    reply = self._request(decl.ref.home, wire.TXN_CTRL,
                                          {"op": "prepare_commit", "txn_id": self.txn_id,
                                           "object_id": decl.ref.object_id})
                    if reply.get("doomed"):
                        doomed, reason = True, "invalidated access set"
                except ForcedAbortError as exc:
                    doomed, reason = True, str(exc)
            if doomed:
                self._finalize_abort("forced", reason)
                return TransactionOutcome("aborted", forced=True, reason=reason,
                                          attempts=self._attempt + 1)
            rolled_mid_commit = ""
            for decl in self._ordered():
                try:
                    self._request(decl.ref.home, wire.TXN_CTRL,
                                  {"op": "finalize_commit", "txn_id": self.txn_id,
                                   "object_id": decl.ref.object_id})
                except ForcedAbortError as exc:
                    # A lease sweep raced the commit and reverted this object.
                    # Some siblings may have finalized already; report the
                    # conservative outcome (see README on crash-during-commit).
                    rolled_mid_commit = str(exc)
            if rolled_mid_commit:
                self._finalize_abort("forced", rolled_mid_commit)
                return TransactionOutcome("aborted", forced=True,
                                          reason=rolled_mid_commit,
                                          attempts=self._attempt + 1)
        else:
            self._release_locks()
        self.session.recorder.record(history.COMMIT, self.txn_id)
        self.state = "committed"
        self._stop_heartbeats()
        return TransactionOutcome("committed", attempts=self._attempt + 1)

    def abort(self) -> None:
        """Inside a body this raises the control signal the runner catches;
        called directly it finalizes the abort immediately."""
        if self._body_depth:
            raise ManualAbortRequested()
        self._finalize_abort("manual")

    def retry(self) -> None:
        if not self._body_depth:
            raise TransactionStateError("retry() only makes sense inside start()")
        raise RetryRequested()

    def _finalize_abort(self, mode: str, reason: str = "") -> None:
        if self.state != "active":
            return
        if self.algorithm in VERSIONED_ALGORITHMS:
            for home in {d.ref.home for d in self._ordered()}:
                self._request(home, wire.TXN_CTRL,
                              {"op": "signal_abort", "txn_id": self.txn_id})
            for decl in self._ordered():
                self._request(decl.ref.home, wire.TXN_CTRL,
                              {"op": "abort_object", "txn_id": self.txn_id,
                               "object_id": decl.ref.object_id})
        else:
            self._release_locks(restore=self.algorithm != "glock")
        self.session.recorder.record(history.ABORT, self.txn_id,
                                     extra={"mode": mode, "reason": reason})
        self.state = "aborted"
        self._stop_heartbeats()

    def _release_locks(self, restore: bool = False) -> None:
        if self.algorithm == "glock":
            home = self.session.channel.addresses()[0]
            self._request(home, wire.TXN_CTRL,
                          {"op": "unlock", "txn_id": self.txn_id,
                           "object_id": GLOBAL_LOCK_ID})
            self._held_locks.discard(GLOBAL_LOCK_ID)
            return
        for decl in self._ordered():
            oid = decl.ref.object_id
            if oid not in self._held_locks:
                continue
            if restore:
                self._request(decl.ref.home, wire.TXN_CTRL,
                              {"op": "lock_restore", "txn_id": self.txn_id,
                               "object_id": oid})
            self._request(decl.ref.home, wire.TXN_CTRL,
                          {"op": "unlock", "txn_id": self.txn_id, "object_id": oid})
            self._held_locks.discard(oid)

    # -- run loop -----------------------------------------------------------------------------

    def start(self, body: Callable[["Transaction"], None]) -> TransactionOutcome:
        """Run body inside the transaction, committing at the end. Manual
        abort and retry are honored; forced aborts rerun the body when
        auto_retry allows."""
        while True:
            self.begin()
            try:
                self._body_depth += 1
                try:
                    body(self)
                finally:
                    self._body_depth -= 1
            except ManualAbortRequested:
                self._finalize_abort("manual")
                return TransactionOutcome("aborted", attempts=self._attempt + 1)
            except RetryRequested:
                self._finalize_abort("manual", reason="retry")
                if self._attempt >= self.max_retries:
                    raise RetryExhaustedError(
                        f"{self._base_id}: no retry attempts remaining") from None
                self._next_attempt()
                continue
            except ForcedAbortError as exc:
                if self.auto_retry and self._attempt < self.max_retries:
                    self._next_attempt()
                    continue
                return TransactionOutcome("aborted", forced=True, reason=str(exc),
                                          attempts=self._attempt + 1)
            except BaseException:
                if self.state == "active":
                    self._finalize_abort("manual", reason="body error")
                raise
            outcome = self.commit()
            if outcome.forced and self.auto_retry and self._attempt < self.max_retries:
                self._next_attempt()
                continue
            return outcome

    def _next_attempt(self) -> None:
        self._attempt += 1
        self.state = "new"
        self.pvs = {}
        self._lock_counts.clear()
        self._held_locks.clear()

    # -- heartbeats ---------------------------------------------------------------------------------

    def _start_heartbeats(self) -> None:
        if not self.heartbeat_interval:
            return
        self._hb_stop = threading.Event()
        homes = sorted({d.ref.home for d in self._ordered()})
        txn_id = self.txn_id

        def beat(stop: threading.Event):
            while not stop.wait(self.heartbeat_interval):
                if self._hb_paused.is_set():
                    continue
                for home in homes:
                    try:
                        self.session.channel.request(home, wire.HEARTBEAT,
                                                     {"txn_id": txn_id})
                    except Exception:
                        pass  # a dead node surfaces on the next real request

        threading.Thread(target=beat, args=(self._hb_stop,),
                         name=f"hb-{txn_id}", daemon=True).start()

    def _stop_heartbeats(self) -> None:
        if self._hb_stop is not None:
            self._hb_stop.set()
            self._hb_stop = None

    def pause_heartbeats(self) -> None:
        """Simulate an unresponsive client without killing the process."""
        self._hb_paused.set()

    def resume_heartbeats(self) -> None:
        self._hb_paused.clear()

"""Per-(transaction, object) concurrency control state machine.

A proxy lives on the object's home node and carries everything one
transaction needs for one object: the private version, declared call bounds,
call counters, both buffers, and the release/termination bookkeeping. The
client side never sees buffers or state, only method return payloads.

Call bounds (upper limits on how many times the transaction will invoke
methods of each class) drive early release: once a transaction provably
cannot touch an object again, the object is handed to its successor without
waiting for commit. Unbounded declarations are legal and simply release at
termination.

Abort recovery uses restore epochs. Every restore of an object's live state
bumps its epoch; a transaction records the epoch at the moment it first
consumes the state. An aborting transaction that modified live state and
exposed it (released before terminating) leaves an invalidation mark
(pv, epoch). A transaction is doomed exactly when it consumed the object in
the same epoch as a lower-versioned aborter's exposed writes: it read data
that was later annulled. Consumers of a restored (fresh-epoch) state never
match an old mark, so cascades die out precisely where the data lineage was
repaired.
"""

import threading
from dataclasses import dataclass
from typing import Callable, Optional

from . import objects as objmod
from .errors import ForcedAbortError, SupremumExceededError
from .executor import ConditionExecutor, TaskHandle
from .objects import CopyBuffer, LogBuffer, OpClass, SharedObjectDef
from .versioning import VersionCounters


@dataclass(frozen=True)
class Suprema:
    """Declared upper bounds on calls per operation class. None = unbounded."""
    max_reads: Optional[int] = None
    max_writes: Optional[int] = None
    max_updates: Optional[int] = None

    def __post_init__(self):
        for name in ("max_reads", "max_writes", "max_updates"):
            bound = getattr(self, name)
            if bound is not None and bound < 0:
                raise ValueError(f"{name} must be non-negative, got {bound}")

    @property
    def total(self) -> Optional[int]:
        if None in (self.max_reads, self.max_writes, self.max_updates):
            return None
        return self.max_reads + self.max_writes + self.max_updates

    @property
    def write_class(self) -> Optional[int]:
        if None in (self.max_writes, self.max_updates):
            return None
        return self.max_writes + self.max_updates

    @property
    def read_only(self) -> bool:
        no_reads = self.max_reads == 0
        return self.write_class == 0 and not no_reads

    def to_wire(self) -> dict:
        return {"max_reads": self.max_reads, "max_writes": self.max_writes,
                "max_updates": self.max_updates}

    @staticmethod
    def from_wire(body: dict) -> "Suprema":
        return Suprema(body.get("max_reads"), body.get("max_writes"),
                       body.get("max_updates"))


class RecoveryState:
    """Per-object restore epoch and invalidation marks. Guarded by the
    hosted object's guard."""

    def __init__(self):
        self.epoch = 0
        self.invalidations: list[tuple[int, int]] = []  # (aborter pv, epoch)

    def is_tainted(self, pv: int, consumed_epoch: Optional[int]) -> bool:
        if consumed_epoch is None:
            return False
        return any(mark_pv < pv and mark_epoch == consumed_epoch
                   for mark_pv, mark_epoch in self.invalidations)

    def add(self, pv: int, epoch: int) -> None:
        self.invalidations.append((pv, epoch))


class HostedObject:
    """A shared object at its home node: definition, live state, version
    counters, and recovery bookkeeping."""

    def __init__(self, object_id: str, def_: SharedObjectDef, state: dict,
                 node_id: str = "local"):
        self.object_id = object_id
        self.def_ = def_
        self.state = state
        self.node_id = node_id
        self.versions = VersionCounters(object_id)
        self.recovery = RecoveryState()
        self.guard = threading.RLock()


class NodeTxn:
    """Node-local view of one transaction: shared abort signal and a sticky
    doomed flag so sibling proxies on the same node fail fast."""

    def __init__(self, txn_id: str, irrevocable: bool = False,
                 algorithm: str = "optsva-cf"):
        self.txn_id = txn_id
        self.irrevocable = irrevocable
        self.algorithm = algorithm
        self.abort_event = threading.Event()
        self.doomed = False
        self.doom_reason = ""
        self.proxies: list["BaseVersionedProxy"] = []

    def mark_doomed(self, reason: str) -> None:
        self.doomed = True
        if not self.doom_reason:
            self.doom_reason = reason


class BaseVersionedProxy:
    """Common version-discipline machinery shared by the buffered engine and
    the call-count-only baseline: first-consumption checkpointing, doom
    verdicts, termination, restore, and invalidation."""

    def __init__(self, hosted: HostedObject, txn: NodeTxn, pv: int,
                 suprema: Suprema, executor: ConditionExecutor,
                 wait_timeout: Optional[float] = None,
                 on_release: Optional[Callable[[str, str, int], None]] = None):
        self.hosted = hosted
        self.txn = txn
        self.pv = pv
        self.suprema = suprema
        self.executor = executor
        self.wait_timeout = wait_timeout
        self._on_release = on_release

        self.cc = 0                      # calls that touched live state or buffers
        self.wc = 0                      # write-class calls
        self.accessed_directly = False
        self.released = False
        self.consumed_epoch: Optional[int] = None
        self.modified_live = False
        self.stored: Optional[CopyBuffer] = None
        self.buf: Optional[CopyBuffer] = None
        self.release_task: Optional[TaskHandle] = None
        self.rolled_back = False
        self.finalized = False

    # -- helpers ---------------------------------------------------------------

    @property
    def versions(self) -> VersionCounters:
        return self.hosted.versions

    def _fail_if_signalled(self) -> None:
        if self.rolled_back:
            raise ForcedAbortError("proxy rolled back after missed heartbeats")
        if self.txn.abort_event.is_set() or self.txn.doomed:
            raise ForcedAbortError(self.txn.doom_reason or "transaction aborting")

    def _check_validity(self) -> None:
        """Doom check against this object's invalidation marks plus the
        node-local sticky flag. Caller holds the guard or tolerates races
        toward stale-false (the termination check is authoritative)."""
        self._fail_if_signalled()
        if self.hosted.recovery.is_tainted(self.pv, self.consumed_epoch):
            self.txn.mark_doomed(f"consumed invalidated state of {self.hosted.object_id}")
            raise ForcedAbortError(self.txn.doom_reason)

    def _wait_my_access_turn(self) -> None:
        """Block until the access condition holds (termination condition for
        irrevocable transactions, so nothing released-but-uncommitted is ever
        consumed)."""
        if self.txn.irrevocable:
            self._wait_turn(self.versions.wait_termination)
        else:
            self._wait_turn(self.versions.wait_access)

    def _wait_turn(self, waiter) -> None:
        self._fail_if_signalled()
        waiter(self.pv, abort_event=self.txn.abort_event, timeout=self.wait_timeout)

    def _consume_live(self) -> None:
        """First contact with live state: record the lineage epoch and take
        the restore checkpoint. Caller holds the guard."""
        self.consumed_epoch = self.hosted.recovery.epoch
        self.stored = objmod.checkpoint(self.hosted.object_id, self.hosted.state, self.pv)

    def _release_now(self) -> None:
        """Advance the released-version counter to pv. Caller holds the guard.
        The release event is recorded before the counter bump: the bump wakes
        the successor, and everything it then records must sort after this
        release."""
        self.released = True
        if self._on_release is not None:
            self._on_release(self.txn.txn_id, self.hosted.object_id, self.pv)
        self.versions.mark_released(self.pv)

    @staticmethod
    def _at_bound(count: int, bound: Optional[int]) -> bool:
        return bound is not None and count >= bound

    # -- termination ------------------------------------------------------------

    def prepare_terminate(self, for_commit: bool) -> bool:
        """Join or cancel outstanding tasks, wait for the termination turn,
        run end-of-life housekeeping, and return this object's doom verdict.
        For aborts the verdict is irrelevant and the abort signal must not
        interrupt the wait (it is our own)."""
        if self.rolled_back or self.finalized:
            return True
        task = self.release_task
        if task is not None:
            if not for_commit and self.executor.cancel_parked(task):
                pass
            else:
                try:
                    task.join(self.wait_timeout)
                except ForcedAbortError:
                    pass
                except Exception as exc:  # noqa: BLE001 - task failure dooms the txn
                    self.txn.mark_doomed(f"release task failed: {exc}")
        abort_event = self.txn.abort_event if for_commit else None
        self.versions.wait_termination(self.pv, abort_event=abort_event,
                                       timeout=self.wait_timeout)
        with self.hosted.guard:
            if self.rolled_back or self.finalized:
                return True
            doomed = (self.txn.doomed or
                      self.hosted.recovery.is_tainted(self.pv, self.consumed_epoch))
            if doomed:
                self.txn.mark_doomed(f"invalidated on {self.hosted.object_id}")
            elif for_commit:
                # Housekeeping is pointless work for a doomed transaction;
                # skipping it keeps pending logs unapplied and unexposed.
                self._commit_housekeeping()
            return doomed

    def _commit_housekeeping(self) -> None:
        """Default: checkpoint never-consumed objects and release anything
        still held. Guard held."""
        if self.consumed_epoch is None:
            self._consume_live()
        if not self.released:
            self._release_now()

    def _mark_terminated(self) -> None:
        """Advance the terminated-version counter; if the object was never
        actually handed over, termination releases it too, and that release is
        part of the recorded release sequence (recorded before the bump, which
        is what wakes successors). The released *flag* is not evidence here: a
        cancelled release task leaves it set with the counter untouched.
        Guard held."""
        lv_before, _ = self.versions.snapshot()
        if lv_before < self.pv:
            self.released = True
            if self._on_release is not None:
                self._on_release(self.txn.txn_id, self.hosted.object_id, self.pv)
        self.versions.mark_terminated(self.pv)
        self.finalized = True

    def finalize_commit(self) -> None:
        with self.hosted.guard:
            if self.rolled_back:
                # The lease sweeper decided this transaction was dead and
                # reverted the object; telling the caller "committed" would
                # be a lie. Conservative answer: forced abort.
                raise ForcedAbortError(
                    f"{self.hosted.object_id} rolled back before commit finalized")
            if self.finalized:
                return
            self._mark_terminated()

    def _abort_recovery(self) -> None:
        """Restore live state if this transaction's writes are the current
        lineage, and leave an invalidation mark if they were exposed to
        successors. Guard held."""
        recovery = self.hosted.recovery
        if self.modified_live and self.consumed_epoch == recovery.epoch:
            # An older restore would have annulled these writes already;
            # here they are live, so rewind and open a fresh epoch.
            objmod.restore(self.hosted.object_id, self.hosted.state, self.stored)
            recovery.epoch += 1
        if self.modified_live and self.released:
            recovery.add(self.pv, self.consumed_epoch)

    def finalize_abort(self) -> None:
        with self.hosted.guard:
            if self.finalized or self.rolled_back:
                return
            self._abort_recovery()
            self._mark_terminated()

    def roll_back_self(self) -> None:
        """Lease-expiry recovery, run as a condition task once the termination
        turn arrives: behave like a forced abort of this single proxy."""
        with self.hosted.guard:
            if self.finalized:
                return
            self._abort_recovery()
            self._mark_terminated()
            self.rolled_back = True


class OptSvaProxy(BaseVersionedProxy):
    """The optimized engine: classified operations, copy/log buffering,
    read-only prefetch, and asynchronous release on the last write."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.log = LogBuffer(self.hosted.object_id)
        self.read_only = self.suprema.read_only
        if self.read_only:
            self._start_prefetch()

    # -- asynchronous tasks -------------------------------------------------------

    def _start_prefetch(self) -> None:
        """Read-only objects are snapshotted and released as soon as the
        transaction's turn comes, on the executor, so earlier operations in
        the transaction body never wait for it."""
        condition = (self.versions.termination_ready if self.txn.irrevocable
                     else self.versions.access_ready)
        self.release_task = self.executor.submit(
            self.hosted.object_id,
            lambda: condition(self.pv),
            self._prefetch_action,
            txn_id=self.txn.txn_id,
        )

    def _prefetch_action(self) -> None:
        with self.hosted.guard:
            self._fail_if_signalled()
            self._consume_live()
            self.buf = objmod.checkpoint(self.hosted.object_id, self.hosted.state, self.pv)
            self._release_now()
            self._check_validity()

    def _start_apply_release(self) -> None:
        """After the final write of a log-only object: wait for the turn in
        the background, then checkpoint, apply the log, snapshot for local
        reads, and release. The main flow continues immediately."""
        condition = (self.versions.termination_ready if self.txn.irrevocable
                     else self.versions.access_ready)
        self.released = True
        self.release_task = self.executor.submit(
            self.hosted.object_id,
            lambda: condition(self.pv),
            self._apply_release_action,
            txn_id=self.txn.txn_id,
        )

    def _apply_release_action(self) -> None:
        with self.hosted.guard:
            self._fail_if_signalled()
            self._consume_live()
            self.modified_live = True
            self.log.apply(self.hosted.def_, self.hosted.state)
            self.buf = objmod.checkpoint(self.hosted.object_id, self.hosted.state, self.pv)
            self._release_now()
            self._check_validity()

    def _join_release_task(self) -> None:
        task = self.release_task
        if task is not None and not task.done():
            task.join(self.wait_timeout)
        elif task is not None:
            task.join(0)  # surface a captured failure

    # -- operation dispatch --------------------------------------------------------

    def invoke(self, method: str, args: tuple):
        self._fail_if_signalled()
        spec = self.hosted.def_.method(method)
        if spec.op_class is OpClass.READ:
            payload, direct = self._read(spec, args)
        elif spec.op_class is OpClass.WRITE:
            payload, direct = self._write(spec, args)
        else:
            payload, direct = self._update(spec, args)
        return payload, direct

    def _read(self, spec, args):
        if self._at_bound(self.cc, self.suprema.total):
            raise SupremumExceededError(
                f"{self.hosted.object_id}: call bound {self.suprema.total} reached")
        if self.read_only or self.released:
            self._join_release_task()
            self._check_validity()
            payload = objmod.buffer_invoke(self.hosted.def_, self.buf, spec.name, args)
            self.cc += 1
            return payload, False
        if not self.accessed_directly:
            self._first_direct_access()
        with self.hosted.guard:
            self._check_validity()
            payload = spec.body(objmod.ReadView(self.hosted.state), *args)
            self.cc += 1
            self._maybe_release_after_direct_op()
        return payload, True

    def _write(self, spec, args):
        if self._at_bound(self.wc, self.suprema.write_class):
            raise SupremumExceededError(
                f"{self.hosted.object_id}: write bound {self.suprema.write_class} reached")
        if self.released:
            raise SupremumExceededError(
                f"{self.hosted.object_id}: write after release")
        if not self.accessed_directly:
            # Log path: no state needed, so no waiting either.
            payload = self.log.record(self.hosted.def_, spec.name, args)
            self.wc += 1
            if self.wc == self.suprema.write_class and self.suprema.max_updates == 0:
                self._start_apply_release()
            return payload, False
        if self._at_bound(self.cc, self.suprema.total):
            raise SupremumExceededError(
                f"{self.hosted.object_id}: call bound {self.suprema.total} reached")
        with self.hosted.guard:
            self._check_validity()
            payload = objmod.run_method(spec, self.hosted.state, args)
            self.modified_live = True
            self.wc += 1
            self.cc += 1
            self._maybe_release_after_direct_op()
        return payload, True

    def _update(self, spec, args):
        if self._at_bound(self.wc, self.suprema.write_class):
            raise SupremumExceededError(
                f"{self.hosted.object_id}: write bound {self.suprema.write_class} reached")
        if self._at_bound(self.cc, self.suprema.total):
            raise SupremumExceededError(
                f"{self.hosted.object_id}: call bound {self.suprema.total} reached")
        if self.released:
            raise SupremumExceededError(
                f"{self.hosted.object_id}: update after release")
        if not self.accessed_directly:
            self._first_direct_access()
        with self.hosted.guard:
            self._check_validity()
            payload = spec.body(self.hosted.state, *args)
            self.modified_live = True
            self.cc += 1
            self.wc += 1
            self._maybe_release_after_direct_op()
        return payload, True

    def _first_direct_access(self) -> None:
        """Wait for the turn, checkpoint for abort recovery, and make pending
        logged writes real before the first read or update executes."""
        self._wait_my_access_turn()
        with self.hosted.guard:
            self._fail_if_signalled()
            self._consume_live()
            if self.log.entries:
                self.modified_live = True
                self.log.apply(self.hosted.def_, self.hosted.state)
            self.accessed_directly = True

    def _maybe_release_after_direct_op(self) -> None:
        """Early release once the state can no longer change under this
        transaction: the write class is exhausted (remaining reads, if any,
        run on the snapshot) or no call of any class is left. The snapshot is
        taken even when nothing can follow; one code path, negligible cost.
        Guard held."""
        if self.released:
            return
        if self.wc == self.suprema.write_class or self.cc == self.suprema.total:
            self.buf = objmod.checkpoint(self.hosted.object_id, self.hosted.state, self.pv)
            self._release_now()

    def _commit_housekeeping(self) -> None:
        """Write-only objects apply their log at commit; untouched objects
        are checkpointed; anything unreleased is released. Guard held."""
        if self.log.entries:
            self._consume_live()
            self.modified_live = True
            self.log.apply(self.hosted.def_, self.hosted.state)
        elif self.consumed_epoch is None:
            self._consume_live()
        if not self.released:
            self._release_now()

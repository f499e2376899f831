"""Reference concurrency controls used for comparison runs.

  sva         the bare versioning mechanism with one combined call bound,
              agnostic of operation classes: every call touches live state,
              so even pure reads block successors until release
  mutex-s2pl  every object locked exclusively at begin, held to the end
  mutex-2pl   as above, but a lock is dropped right after the declared last
              access (bound exhaustion stands in for the programmer's
              "last use" marker)
  rw-s2pl     readers share: declared read-only objects take shared locks
  rw-2pl      shared locks plus early unlock
  glock       one global mutex around the whole transaction; the serial floor

Locks are home-node resident and reached over the same transport as
everything else. Lock acquisition happens in ascending object-id order, so
the strict variants cannot deadlock.
"""

import threading
from typing import Optional

from . import objects as objmod
from .engine import BaseVersionedProxy, HostedObject, NodeTxn
from .errors import (
    ForcedAbortError,
    LockProtocolError,
    SupremumExceededError,
    WatchdogTimeoutError,
)

VERSIONED_ALGORITHMS = ("optsva-cf", "sva")
LOCK_ALGORITHMS = ("mutex-s2pl", "mutex-2pl", "rw-s2pl", "rw-2pl", "glock")
ALL_ALGORITHMS = VERSIONED_ALGORITHMS + LOCK_ALGORITHMS

GLOBAL_LOCK_ID = "__global__"


def uses_read_locks(algorithm: str) -> bool:
    return algorithm.startswith("rw-")


def unlocks_early(algorithm: str) -> bool:
    return algorithm.endswith("-2pl")


class SvaProxy(BaseVersionedProxy):
    """Call-count-only versioning. No buffers, no logs, no operation classes:
    the object is held from first call until the combined bound is exhausted
    or the transaction terminates."""

    def invoke(self, method: str, args: tuple):
        self._fail_if_signalled()
        spec = self.hosted.def_.method(method)
        if self.released:
            raise SupremumExceededError(
                f"{self.hosted.object_id}: call after release")
        if self._at_bound(self.cc, self.suprema.total):
            raise SupremumExceededError(
                f"{self.hosted.object_id}: call bound {self.suprema.total} reached")
        if not self.accessed_directly:
            self._wait_my_access_turn()
            with self.hosted.guard:
                self._fail_if_signalled()
                self._consume_live()
                self.accessed_directly = True
        with self.hosted.guard:
            self._check_validity()
            payload = objmod.run_method(spec, self.hosted.state, args)
            if spec.op_class is not objmod.OpClass.READ:
                self.modified_live = True
            self.cc += 1
            if self.cc == self.suprema.total:
                self._release_now()
        return payload, True


class _RWLock:
    """Reader-writer lock with owner tracking. No fairness queue; callers
    avoid deadlock by global-order acquisition, not by this class."""

    def __init__(self, name: str):
        self.name = name
        self._cond = threading.Condition()
        self._readers: set[str] = set()
        self._writer: Optional[str] = None

    def acquire(self, owner: str, exclusive: bool,
                abort_event: Optional[threading.Event] = None,
                timeout: Optional[float] = None) -> None:
        import time
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                if exclusive:
                    free = self._writer is None and not self._readers
                else:
                    free = self._writer is None
                if free:
                    break
                if abort_event is not None and abort_event.is_set():
                    raise ForcedAbortError("aborted while waiting for a lock")
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise WatchdogTimeoutError(f"lock {self.name} wait timed out")
                self._cond.wait(remaining if remaining is not None else 0.5)
            if exclusive:
                self._writer = owner
            else:
                self._readers.add(owner)

    def release(self, owner: str) -> None:
        with self._cond:
            if self._writer == owner:
                self._writer = None
            elif owner in self._readers:
                self._readers.discard(owner)
            else:
                raise LockProtocolError(f"{owner} does not hold {self.name}")
            self._cond.notify_all()

    def holds(self, owner: str) -> bool:
        with self._cond:
            return self._writer == owner or owner in self._readers


class LockTable:
    """Per-node lock registry: one reader-writer lock per hosted object plus
    the node's slice of the global lock (only the designated home's matters)."""

    def __init__(self):
        self._locks: dict[str, _RWLock] = {}
        self._table_lock = threading.Lock()

    def lock_for(self, object_id: str) -> _RWLock:
        with self._table_lock:
            if object_id not in self._locks:
                self._locks[object_id] = _RWLock(object_id)
            return self._locks[object_id]

    def force_release_all(self, owner: str) -> None:
        """Crash recovery: drop every lock a dead transaction still holds."""
        with self._table_lock:
            locks = list(self._locks.values())
        for lock in locks:
            if lock.holds(owner):
                lock.release(owner)


class LockProxy:
    """Direct execution under an externally held lock, with a checkpoint at
    first touch so a strict-variant abort can restore. The global-lock flavor
    takes no checkpoint: nothing it does is ever visible early, and its abort
    deliberately restores nothing."""

    def __init__(self, hosted: HostedObject, txn: NodeTxn, take_checkpoint: bool):
        self.hosted = hosted
        self.txn = txn
        self.take_checkpoint = take_checkpoint
        self.stored = None
        self.modified_live = False

    def invoke(self, method: str, args: tuple):
        spec = self.hosted.def_.method(method)
        with self.hosted.guard:
            if self.take_checkpoint and self.stored is None:
                self.stored = objmod.checkpoint(
                    self.hosted.object_id, self.hosted.state)
            payload = objmod.run_method(spec, self.hosted.state, args)
            if spec.op_class is not objmod.OpClass.READ:
                self.modified_live = True
        return payload, True

    def restore_on_abort(self) -> None:
        with self.hosted.guard:
            if self.stored is not None and self.modified_live:
                objmod.restore(self.hosted.object_id, self.hosted.state, self.stored)

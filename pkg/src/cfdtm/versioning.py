"""Version counters and the acquisition/access/termination discipline.

Every shared object carries three counters:

  next_grant          the next private version to hand out (first grant is 1)
  released_version    private version of the last transaction to release the
                      object (early, or implicitly at termination)
  terminated_version  private version of the last transaction to commit or
                      abort on the object

A transaction holding private version pv may touch the object only when
pv - 1 == released_version (the access condition) and may commit or abort on
it only when pv - 1 == terminated_version (the termination condition). Both
counters are monotone and terminated_version <= released_version <= next_grant
always holds.

Acquisition of private versions for a whole access set is atomic: grant
mutexes are taken in ascending object-id order (one global order, regardless
of transaction), all versions assigned, then all mutexes dropped. Counters
are 64-bit for practical purposes; overflow is out of scope.
"""

import threading
from typing import Callable, Iterable, Optional

from .errors import (
    ForcedAbortError,
    InvariantViolationError,
    WatchdogTimeoutError,
)


def access_allowed(pv: int, lv: int) -> bool:
    """True iff a transaction with private version pv may access an object
    whose released-version counter reads lv."""
    if pv < 1:
        raise InvariantViolationError(f"private version must be >= 1, got {pv}")
    return pv - 1 == lv


def termination_allowed(pv: int, ltv: int) -> bool:
    """True iff a transaction with private version pv may commit or abort on
    an object whose terminated-version counter reads ltv.

    Equality, not <=: anything else would admit out-of-order terminations.
    """
    if pv < 1:
        raise InvariantViolationError(f"private version must be >= 1, got {pv}")
    return pv - 1 == ltv


class VersionCounters:
    """Counter state for one shared object, with blocking waits.

    mark_released / mark_terminated notify blocked waiters and then invoke
    the registered change hooks (used by the condition-task executor) with
    no lock held.
    """

    def __init__(self, object_id: str):
        self.object_id = object_id
        self._cond = threading.Condition()
        self.next_grant = 0
        self.released_version = 0
        self.terminated_version = 0
        self._grant_cond = threading.Condition()
        self._grant_owner: Optional[str] = None
        self._hooks: list[Callable[[str], None]] = []
        self.stats = None  # optional object with add_wait(seconds)

    # -- change notification -------------------------------------------------

    def add_hook(self, hook: Callable[[str], None]) -> None:
        self._hooks.append(hook)

    def _fire_hooks(self) -> None:
        for hook in self._hooks:
            hook(self.object_id)

    # -- grant mutex (held only during version acquisition) ------------------

    def lock_grant(self, owner: str, timeout: Optional[float] = None) -> None:
        with self._grant_cond:
            if not self._grant_cond.wait_for(lambda: self._grant_owner is None, timeout):
                raise WatchdogTimeoutError(f"grant mutex for {self.object_id} stuck")
            self._grant_owner = owner

    def unlock_grant(self, owner: str) -> None:
        with self._grant_cond:
            if self._grant_owner != owner:
                raise InvariantViolationError(
                    f"grant mutex for {self.object_id} not held by {owner}")
            self._grant_owner = None
            self._grant_cond.notify_all()

    def force_unlock_grant(self, owner: str) -> None:
        """Lease recovery: drop the grant mutex of a crashed transaction."""
        with self._grant_cond:
            if self._grant_owner == owner:
                self._grant_owner = None
                self._grant_cond.notify_all()

    def grant_next(self, owner: str) -> int:
        """Assign the next private version. Caller must hold the grant mutex."""
        with self._grant_cond:
            if self._grant_owner != owner:
                raise InvariantViolationError(
                    f"version grant for {self.object_id} without the grant mutex")
        with self._cond:
            self.next_grant += 1
            return self.next_grant

    # -- reads ----------------------------------------------------------------

    def snapshot(self) -> tuple[int, int]:
        with self._cond:
            return self.released_version, self.terminated_version

    def access_ready(self, pv: int) -> bool:
        with self._cond:
            return access_allowed(pv, self.released_version)

    def termination_ready(self, pv: int) -> bool:
        with self._cond:
            return termination_allowed(pv, self.terminated_version)

    # -- blocking waits --------------------------------------------------------

    def wait_access(self, pv: int, abort_event: Optional[threading.Event] = None,
                    timeout: Optional[float] = None) -> None:
        # >= and not ==: a lease rollback can finalize this pv behind the
        # waiter's back, and the waiter must wake up rather than hang. Callers
        # re-check their own terminal flags after the wait.
        self._wait(lambda: self.released_version >= pv - 1,
                   abort_event, timeout, f"access to {self.object_id} (pv={pv})")

    def wait_termination(self, pv: int, abort_event: Optional[threading.Event] = None,
                         timeout: Optional[float] = None) -> None:
        self._wait(lambda: self.terminated_version >= pv - 1,
                   abort_event, timeout, f"termination on {self.object_id} (pv={pv})")

    def _wait(self, predicate, abort_event, timeout, what) -> None:
        deadline = None if timeout is None else (threading.TIMEOUT_MAX if timeout <= 0
                                                 else _now() + timeout)
        started = None
        try:
            with self._cond:
                while not predicate():
                    if abort_event is not None and abort_event.is_set():
                        raise ForcedAbortError("aborted while waiting")
                    remaining = None if deadline is None else deadline - _now()
                    if remaining is not None and remaining <= 0:
                        raise WatchdogTimeoutError(f"wait for {what} timed out")
                    if started is None:
                        started = _now()
                    # Cap so an abort signal set without a notify is still seen.
                    self._cond.wait(remaining if remaining is not None else 0.5)
        finally:
            if started is not None and self.stats is not None:
                self.stats.add_wait(_now() - started)

    def notify_waiters(self) -> None:
        """Wake blocked waiters so they can observe an abort signal."""
        with self._cond:
            self._cond.notify_all()

    # -- mutations ---------------------------------------------------------------

    def mark_released(self, pv: int) -> None:
        """Publish pv as the released version. Requires the access condition:
        releasing out of order is a fail-fast invariant violation."""
        with self._cond:
            if not access_allowed(pv, self.released_version):
                raise InvariantViolationError(
                    f"out-of-order release of {self.object_id}: "
                    f"pv={pv} while released={self.released_version}")
            self.released_version = pv
            self._check_bounds()
            self._cond.notify_all()
        self._fire_hooks()

    def mark_terminated(self, pv: int) -> None:
        """Publish pv as the terminated version; also releases the object if
        the terminating transaction never did."""
        with self._cond:
            if not termination_allowed(pv, self.terminated_version):
                raise InvariantViolationError(
                    f"out-of-order termination on {self.object_id}: "
                    f"pv={pv} while terminated={self.terminated_version}")
            self.terminated_version = pv
            if self.released_version < pv:
                if self.released_version != pv - 1:
                    raise InvariantViolationError(
                        f"termination on {self.object_id} skipped a release: "
                        f"pv={pv}, released={self.released_version}")
                self.released_version = pv
            self._check_bounds()
            self._cond.notify_all()
        self._fire_hooks()

    def _check_bounds(self) -> None:
        if not (self.terminated_version <= self.released_version <= self.next_grant):
            raise InvariantViolationError(
                f"counter ordering broken on {self.object_id}: "
                f"ltv={self.terminated_version} lv={self.released_version} "
                f"gv={self.next_grant}")


def _now() -> float:
    import time
    return time.monotonic()


def acquire_versions(counters: dict[str, VersionCounters],
                     txn_id: str,
                     declared: Iterable[str],
                     timeout: Optional[float] = None) -> dict[str, int]:
    """Atomically assign one private version per declared object.

    Grant mutexes are taken in ascending object-id order and all released
    before return, so concurrent acquisitions cannot deadlock and the
    resulting versions are consistent across objects (a transaction that is
    ahead on one object is ahead on all shared ones).
    """
    ids = list(declared)
    if len(set(ids)) != len(ids):
        raise InvariantViolationError(f"duplicate declarations: {ids}")
    ordered = sorted(ids)
    locked: list[VersionCounters] = []
    try:
        for oid in ordered:
            counters[oid].lock_grant(txn_id, timeout)
            locked.append(counters[oid])
        return {oid: counters[oid].grant_next(txn_id) for oid in ordered}
    finally:
        for vc in locked:
            vc.unlock_grant(txn_id)

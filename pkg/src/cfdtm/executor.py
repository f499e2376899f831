"""Condition-task executor: queued actions that fire when an object's version
counters satisfy a predicate.

One executor serves a whole process (not one per transaction); actions run on
a small worker pool so a long action cannot convoy unrelated releases. Tasks
are parked keyed by object id and re-evaluated only when that object's
counters change. Evaluation and parking happen under one registry lock, so a
counter change can never slip between "condition false" and "task parked"
(no lost wakeups).
"""

import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

from .errors import WatchdogTimeoutError

_UNSET = object()


class TaskHandle:
    """Joinable result of a submitted condition task."""

    def __init__(self, task_id: int, object_id: str, txn_id: Optional[str]):
        self.task_id = task_id
        self.object_id = object_id
        self.txn_id = txn_id
        self._done = threading.Event()
        self._outcome = _UNSET
        self._error: Optional[BaseException] = None
        self.cancelled = False

    def _complete(self, outcome=None, error: Optional[BaseException] = None) -> None:
        self._outcome = outcome
        self._error = error
        self._done.set()

    def done(self) -> bool:
        return self._done.is_set()

    def join(self, timeout: Optional[float] = None):
        """Block until the action finished; returns its outcome or re-raises
        its captured failure. Joining twice yields the same result."""
        if not self._done.wait(timeout):
            raise WatchdogTimeoutError(
                f"join of task {self.task_id} on {self.object_id} timed out")
        if self._error is not None:
            raise self._error
        return self._outcome


class _Parked:
    __slots__ = ("handle", "condition", "action")

    def __init__(self, handle: TaskHandle, condition: Callable[[], bool],
                 action: Callable[[], object]):
        self.handle = handle
        self.condition = condition
        self.action = action


class ConditionExecutor:
    """Parks (condition, action) pairs per object and runs actions once their
    condition holds. Actions run at most once; a failure is captured into the
    handle and never kills the executor."""

    def __init__(self, workers: int = 2):
        self._workers = workers
        self._pool: Optional[ThreadPoolExecutor] = None
        self._lock = threading.Lock()
        self._parked: dict[str, list[_Parked]] = {}
        self._next_id = 0
        self._closed = False

    def submit(self, object_id: str, condition: Callable[[], bool],
               action: Callable[[], object], txn_id: Optional[str] = None) -> TaskHandle:
        """Queue an action keyed by object_id. If the condition already holds
        the action is scheduled immediately; otherwise it parks until a
        counter change on that object makes the condition true."""
        with self._lock:
            self._next_id += 1
            handle = TaskHandle(self._next_id, object_id, txn_id)
            task = _Parked(handle, condition, action)
            if condition():
                self._dispatch(task)
            else:
                self._parked.setdefault(object_id, []).append(task)
        return handle

    def on_counter_change(self, object_id: str) -> None:
        """Re-evaluate every task parked on object_id; fire the true ones in
        submission order."""
        with self._lock:
            queue = self._parked.get(object_id)
            if not queue:
                return
            still_parked = []
            for task in queue:
                if task.handle.cancelled:
                    continue
                if task.condition():
                    self._dispatch(task)
                else:
                    still_parked.append(task)
            if still_parked:
                self._parked[object_id] = still_parked
            else:
                self._parked.pop(object_id, None)

    def cancel_parked(self, handle: TaskHandle) -> bool:
        """Cancel a task that has not fired yet. Returns True if cancelled;
        False means the task already fired (caller should join instead)."""
        with self._lock:
            queue = self._parked.get(handle.object_id, [])
            for task in queue:
                if task.handle is handle:
                    queue.remove(task)
                    handle.cancelled = True
                    handle._complete(outcome=None)
                    return True
        return False

    def _dispatch(self, task: _Parked) -> None:
        # Registry lock held; pool submission never blocks.
        if self._closed:
            task.handle._complete(error=RuntimeError("executor closed"))
            return
        if self._pool is None:
            self._pool = ThreadPoolExecutor(
                max_workers=self._workers, thread_name_prefix="cond-exec")
        self._pool.submit(self._run, task)

    @staticmethod
    def _run(task: _Parked) -> None:
        try:
            task.handle._complete(outcome=task.action())
        except BaseException as exc:  # noqa: BLE001 - captured into the handle
            task.handle._complete(error=exc)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            pool, self._pool = self._pool, None
            leftovers = [t for q in self._parked.values() for t in q]
            self._parked.clear()
        for task in leftovers:
            task.handle._complete(error=RuntimeError("executor closed"))
        if pool is not None:
            pool.shutdown(wait=False)

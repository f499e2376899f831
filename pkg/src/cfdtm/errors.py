"""Exception taxonomy for the toolkit.

Control-flow exceptions (ManualAbortRequested, RetryRequested) are raised by
transaction bodies and caught by the transaction runner; they never escape to
user code. Everything else is a real error.
"""


class CfdtmError(Exception):
    """Base class for all toolkit errors."""


class UnknownObjectError(CfdtmError):
    """Lookup of an object id that is not registered anywhere."""


class DuplicateObjectError(CfdtmError):
    """Registration under an id that already has a home."""


class UnknownMethodError(CfdtmError):
    """Invocation of a method absent from the object's interface."""


class MisclassifiedOperationError(CfdtmError):
    """A method body violated its declared class (a read mutated state, or a
    write read state)."""


class StateCopyError(CfdtmError):
    """Object state could not be serialized for a checkpoint or the wire."""


class SupremumExceededError(CfdtmError):
    """A transaction called an object more times than it declared."""


class InvariantViolationError(CfdtmError):
    """Internal concurrency-control invariant broken; fail fast."""


class TransactionStateError(CfdtmError):
    """Operation attempted in the wrong transaction lifecycle state."""


class ForcedAbortError(CfdtmError):
    """The engine aborted the transaction (cascade, supremum violation, or
    proxy rollback). Distinct from a manual abort in all reporting."""

    def __init__(self, reason: str = "forced"):
        super().__init__(reason)
        self.reason = reason


class RetryExhaustedError(CfdtmError):
    """retry() was requested with no attempts remaining."""


class WatchdogTimeoutError(CfdtmError):
    """A bounded wait expired; treated as a liveness bug, never retried."""


class TransportFaultError(CfdtmError):
    """A remote request failed (node unreachable, protocol error, or the
    remote side reported a fault that maps to no richer exception)."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


class LockProtocolError(CfdtmError):
    """Misuse of the lock baselines (double early unlock, unlock of a lock
    that is not held)."""


# Control-flow signals used inside transaction bodies.

class ManualAbortRequested(Exception):
    """Raised by Transaction.abort() inside a body."""


class RetryRequested(Exception):
    """Raised by Transaction.retry() inside a body."""

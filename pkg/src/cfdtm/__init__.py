"""Control-flow distributed transactional memory toolkit.

Pessimistic, version-based concurrency control over remote objects with
classified operations, early release driven by declared call bounds,
server-side copy/log buffering with asynchronous release, reference
lock-based and call-count-only baselines, a history recorder with offline
serializability checking, and a synthetic contention benchmark.
"""

from .bench import BenchConfig, emit_csv, generate_workload, run_benchmark, run_scenario
from .client import RemoteRef, Session, Transaction, TransactionOutcome
from .engine import Suprema
from .errors import (
    CfdtmError,
    ForcedAbortError,
    RetryExhaustedError,
    SupremumExceededError,
    TransactionStateError,
)
from .history import (
    Recorder,
    check_abort_accounting,
    check_serializable,
    check_version_order,
    read_history,
    write_history,
)
from .node import NodeServer
from .objects import (
    MethodSpec,
    OpClass,
    SharedObjectDef,
    bank_account,
    counter_cell,
    reference_cell,
)
from .transport import LocalCluster, TcpChannel, TcpNodeHost

__all__ = [
    "BenchConfig", "CfdtmError", "ForcedAbortError", "LocalCluster",
    "MethodSpec", "NodeServer", "OpClass", "Recorder", "RemoteRef",
    "RetryExhaustedError", "Session", "SharedObjectDef", "Suprema",
    "SupremumExceededError", "TcpChannel", "TcpNodeHost", "Transaction",
    "TransactionOutcome", "TransactionStateError", "bank_account",
    "check_abort_accounting", "check_serializable", "check_version_order",
    "counter_cell", "emit_csv", "generate_workload", "read_history",
    "reference_cell", "run_benchmark", "run_scenario", "write_history",
]

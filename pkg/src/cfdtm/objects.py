"""Shared objects with classified operations, plus the two buffer kinds.

An object's state is a flat dict of named fields with codec-serializable
values; method bodies receive a view of that state whose capabilities match
the declared operation class:

  READ    may read fields, never assign them
  WRITE   may assign fields, never read them
  UPDATE  full access

Views enforce the classification on every execution: a read that assigns or
a write that reads raises MisclassifiedOperationError instead of silently
corrupting concurrency decisions.

A copy buffer is a deep snapshot (serialization roundtrip) used either for
local reads after release or to restore the object on abort. A log buffer
records write invocations without the object's state; eager bodies run at
record time against a capture view and stash their field assignments, so
applying the log later is a replay of effects. Bodies flagged eager=False
are only logged and execute when the log is applied.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

from . import codec
from .errors import MisclassifiedOperationError, UnknownMethodError

State = dict


class OpClass(Enum):
    READ = "read"
    WRITE = "write"
    UPDATE = "update"


@dataclass(frozen=True)
class MethodSpec:
    name: str
    op_class: OpClass
    body: Callable[..., Any]           # body(state_view, *args) -> payload
    eager: bool = True                 # writes only: executable at log time


class SharedObjectDef:
    """Interface of a shared object: method table plus an initial-state
    factory. kind identifies the definition for offline re-execution."""

    def __init__(self, kind: str, methods: list[MethodSpec],
                 initial_state: Optional[Callable[[], State]] = None):
        self.kind = kind
        self.methods = {m.name: m for m in methods}
        self._initial_state = initial_state or dict

    def method(self, name: str) -> MethodSpec:
        try:
            return self.methods[name]
        except KeyError:
            raise UnknownMethodError(f"{self.kind} has no method {name!r}") from None

    def classify(self, name: str) -> OpClass:
        return self.method(name).op_class

    def initial_state(self) -> State:
        return self._initial_state()


# -- state views --------------------------------------------------------------

class ReadView:
    """Read-only window over a state dict."""

    __slots__ = ("_state",)

    def __init__(self, state: State):
        self._state = state

    def __getitem__(self, key):
        return self._state[key]

    def get(self, key, default=None):
        return self._state.get(key, default)

    def __contains__(self, key):
        return key in self._state

    def keys(self):
        return self._state.keys()

    def __setitem__(self, key, value):
        raise MisclassifiedOperationError("read body assigned a state field")

    def __delitem__(self, key):
        raise MisclassifiedOperationError("read body deleted a state field")


class WriteCaptureView:
    """Write-only window: records assignments, refuses reads.

    Reads raise so that a write body depending on prior state is caught at
    the first execution rather than producing wrong log effects.
    """

    __slots__ = ("effects",)

    def __init__(self):
        self.effects: State = {}

    def __setitem__(self, key, value):
        self.effects[key] = value

    def __getitem__(self, key):
        raise MisclassifiedOperationError("write body read a state field")

    def get(self, key, default=None):
        raise MisclassifiedOperationError("write body read a state field")

    def __contains__(self, key):
        raise MisclassifiedOperationError("write body read a state field")

    def __delitem__(self, key):
        raise MisclassifiedOperationError("write bodies assign fields, never delete")


def run_method(spec: MethodSpec, state: State, args: tuple) -> Any:
    """Execute a body directly against live state with the view its class
    mandates. This is also the sequential-execution semantics the offline
    checkers replay."""
    if spec.op_class is OpClass.READ:
        return spec.body(ReadView(state), *args)
    if spec.op_class is OpClass.WRITE:
        view = WriteCaptureView()
        payload = spec.body(view, *args)
        state.update(view.effects)
        return payload
    return spec.body(state, *args)


# -- copy buffer ----------------------------------------------------------------

@dataclass
class CopyBuffer:
    """Deep snapshot of an object's state. Isolated both ways: later mutation
    of the live object never shows in the buffer and vice versa."""
    object_id: str
    state: State
    origin_pv: int = 0


def checkpoint(object_id: str, state: State, origin_pv: int = 0) -> CopyBuffer:
    return CopyBuffer(object_id, codec.deep_copy(state), origin_pv)


def restore(object_id: str, state: State, buffer: CopyBuffer) -> None:
    """Overwrite state in place with the buffer's snapshot. Idempotent; the
    buffer stays intact for repeated restores."""
    if buffer.object_id != object_id:
        raise MisclassifiedOperationError(
            f"restore of {object_id} from a buffer of {buffer.object_id}")
    state.clear()
    state.update(codec.deep_copy(buffer.state))


def buffer_invoke(def_: SharedObjectDef, buffer: CopyBuffer, method: str,
                  args: tuple) -> Any:
    """Run a read body against a copy buffer; the buffer is never modified."""
    spec = def_.method(method)
    if spec.op_class is not OpClass.READ:
        raise MisclassifiedOperationError(
            f"{method} is {spec.op_class.value}, only reads run on a copy buffer")
    return spec.body(ReadView(buffer.state), *args)


# -- log buffer --------------------------------------------------------------------

@dataclass
class LogEntry:
    method: str
    args: tuple
    effects: Optional[State]    # None when the body was deferred
    payload: Any = None


@dataclass
class LogBuffer:
    """Recorded write invocations on an object's interface, without its state.
    Applying the log to the live object equals executing the calls in order."""
    object_id: str
    entries: list = field(default_factory=list)

    def record(self, def_: SharedObjectDef, method: str, args: tuple) -> Any:
        spec = def_.method(method)
        if spec.op_class is not OpClass.WRITE:
            raise MisclassifiedOperationError(
                f"{method} is {spec.op_class.value}, only writes go to a log buffer")
        if spec.eager:
            view = WriteCaptureView()
            payload = spec.body(view, *args)
            self.entries.append(LogEntry(method, args, view.effects, payload))
            return payload
        self.entries.append(LogEntry(method, args, None))
        return None

    def apply(self, def_: SharedObjectDef, state: State) -> None:
        """Replay the log onto live state, in order, consuming it. Deferred
        entries execute their body now; eager ones just apply stored effects."""
        for entry in self.entries:
            if entry.effects is not None:
                state.update(entry.effects)
            else:
                view = WriteCaptureView()
                def_.method(entry.method).body(view, *entry.args)
                state.update(view.effects)
        self.entries.clear()


# -- stock definitions -----------------------------------------------------------

def reference_cell(latency_s: float = 0.0) -> SharedObjectDef:
    """Single-value cell: read() returns the value, write(v) replaces it.
    latency_s simulates operation cost on the home node."""
    import time

    def _read(s):
        if latency_s:
            time.sleep(latency_s)
        return s["value"]

    def _write(s, v):
        if latency_s:
            time.sleep(latency_s)
        s["value"] = v

    return SharedObjectDef(
        kind=f"refcell:{latency_s}" if latency_s else "refcell",
        methods=[
            MethodSpec("read", OpClass.READ, _read),
            MethodSpec("write", OpClass.WRITE, _write),
        ],
        initial_state=lambda: {"value": 0},
    )


def bank_account() -> SharedObjectDef:
    """Account with a read-only balance, updates that view state, and a pure
    write that wipes it."""

    def _balance(s):
        return s["balance"]

    def _deposit(s, amount):
        s["balance"] += amount

    def _withdraw(s, amount):
        s["balance"] -= amount

    def _reset(s):
        s["balance"] = 0

    return SharedObjectDef(
        kind="account",
        methods=[
            MethodSpec("balance", OpClass.READ, _balance),
            MethodSpec("deposit", OpClass.UPDATE, _deposit),
            MethodSpec("withdraw", OpClass.UPDATE, _withdraw),
            MethodSpec("reset", OpClass.WRITE, _reset),
        ],
        initial_state=lambda: {"balance": 0},
    )


def counter_cell() -> SharedObjectDef:
    """Cell with an increment update on top of read/write; used by tests that
    need an operation reading prior state."""

    def _read(s):
        return s["value"]

    def _write(s, v):
        s["value"] = v

    def _increment(s):
        s["value"] += 1
        return s["value"]

    return SharedObjectDef(
        kind="counter",
        methods=[
            MethodSpec("read", OpClass.READ, _read),
            MethodSpec("write", OpClass.WRITE, _write),
            MethodSpec("increment", OpClass.UPDATE, _increment),
        ],
        initial_state=lambda: {"value": 0},
    )


_STOCK_FACTORIES: dict[str, Callable[[], SharedObjectDef]] = {
    "refcell": reference_cell,
    "account": bank_account,
    "counter": counter_cell,
}


def stock_def(kind: str) -> SharedObjectDef:
    """Resolve a definition by kind name, as stored in history files."""
    if kind.startswith("refcell:"):
        return reference_cell(float(kind.split(":", 1)[1]))
    try:
        return _STOCK_FACTORIES[kind]()
    except KeyError:
        raise UnknownMethodError(f"no stock object definition {kind!r}") from None

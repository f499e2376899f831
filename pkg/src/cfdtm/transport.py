"""Two transports behind one request interface.

LocalCluster wires several NodeServers into one process sharing a single
condition-task executor and a virtual-clock recorder; requests are direct
function calls, so scenario tests get deterministic timestamps.

TcpNodeHost serves one NodeServer over length-prefixed frames; TcpChannel is
the matching client side, one socket per (thread, address) so a blocking
request never interleaves with another from the same thread. Heartbeats use
their own thread and therefore their own socket.
"""

import itertools
import socket
import threading
from typing import Callable, Optional

from . import wire
from .errors import (
    ForcedAbortError,
    InvariantViolationError,
    LockProtocolError,
    TransportFaultError,
    UnknownMethodError,
    UnknownObjectError,
    WatchdogTimeoutError,
)
from .executor import ConditionExecutor
from .history import Recorder
from .node import NodeServer


def raise_for_fault(body: dict):
    code = body.get("code", "internal")
    message = body.get("message", "")
    if code in ("forced_abort", "supremum", "misclassified", "state_copy"):
        raise ForcedAbortError(f"{code}: {message}" if code != "forced_abort" else message)
    if code == "unknown_object":
        raise UnknownObjectError(message)
    if code == "unknown_method":
        raise UnknownMethodError(message)
    if code == "lock_protocol":
        raise LockProtocolError(message)
    if code == "watchdog":
        raise WatchdogTimeoutError(message)
    if code == "invariant":
        raise InvariantViolationError(message)
    raise TransportFaultError(code, message)


class Channel:
    """Synchronous request interface to a set of nodes."""

    def request(self, addr: str, kind: int, body: dict) -> dict:
        raise NotImplementedError

    def addresses(self) -> list[str]:
        raise NotImplementedError


class LocalCluster:
    """In-process cluster of simulated nodes. One executor per process and
    one recorder whose virtual clock is the global event sequence."""

    def __init__(self, n_nodes: int = 1, wait_timeout: Optional[float] = None,
                 executor_workers: int = 2, lease_timeout: Optional[float] = None):
        self.executor = ConditionExecutor(workers=executor_workers)
        self.recorder = Recorder(virtual_clock=True)
        self.nodes: dict[str, NodeServer] = {}
        for i in range(n_nodes):
            node_id = f"n{i}"
            self.nodes[node_id] = NodeServer(
                node_id, executor=self.executor, recorder=self.recorder,
                wait_timeout=wait_timeout, lease_timeout=lease_timeout)

    def node(self, index: int) -> NodeServer:
        return self.nodes[f"n{index}"]

    def register(self, node_index: int, object_id: str, def_, initial_state=None):
        return self.node(node_index).register(object_id, def_, initial_state)

    def channel(self) -> "LocalChannel":
        return LocalChannel(self)

    def close(self) -> None:
        for node in self.nodes.values():
            node.close()
        self.executor.close()


class LocalChannel(Channel):
    def __init__(self, cluster: LocalCluster):
        self._cluster = cluster

    def request(self, addr: str, kind: int, body: dict) -> dict:
        node = self._cluster.nodes.get(addr)
        if node is None:
            raise TransportFaultError("unreachable", f"no node {addr}")
        reply_kind, reply = node.handle(kind, body)
        if reply_kind == wire.FAULT:
            raise_for_fault(reply)
        return reply

    def addresses(self) -> list[str]:
        return list(self._cluster.nodes)


class TcpNodeHost:
    """Serves one node over TCP: accept loop plus one handler thread per
    connection; a connection carries one request at a time."""

    def __init__(self, node: NodeServer, listen: str = "127.0.0.1:0"):
        self.node = node
        host, port = listen.rsplit(":", 1)
        self._sock = socket.create_server((host, int(port)))
        self.address = "%s:%d" % self._sock.getsockname()[:2]
        self._closed = threading.Event()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"{node.node_id}-accept", daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        with conn:
            while not self._closed.is_set():
                try:
                    kind, corr_id, body = wire.read_frame(conn)
                except TransportFaultError:
                    return
                reply_kind, reply = self.node.handle(kind, body)
                try:
                    conn.sendall(wire.encode_frame(reply_kind, corr_id, reply))
                except OSError:
                    return

    def close(self) -> None:
        self._closed.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self.node.close()


class TcpChannel(Channel):
    """Client side of the TCP transport. capture, when given, receives
    (direction, kind, body) triples for wire-level assertions in tests."""

    _corr = itertools.count(1)

    def __init__(self, addresses: list[str],
                 capture: Optional[Callable[[str, int, dict], None]] = None,
                 connect_timeout: float = 5.0):
        self._addresses = list(addresses)
        self._capture = capture
        self._connect_timeout = connect_timeout
        self._local = threading.local()

    def _sock_for(self, addr: str) -> socket.socket:
        cache = getattr(self._local, "socks", None)
        if cache is None:
            cache = self._local.socks = {}
        sock = cache.get(addr)
        if sock is None:
            host, port = addr.rsplit(":", 1)
            sock = socket.create_connection((host, int(port)),
                                            timeout=self._connect_timeout)
            sock.settimeout(None)  # requests may legitimately block for long
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            cache[addr] = sock
        return sock

    def _drop(self, addr: str) -> None:
        cache = getattr(self._local, "socks", {})
        sock = cache.pop(addr, None)
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def request(self, addr: str, kind: int, body: dict) -> dict:
        corr_id = next(self._corr)
        if self._capture:
            self._capture("send", kind, body)
        try:
            sock = self._sock_for(addr)
            sock.sendall(wire.encode_frame(kind, corr_id, body))
            reply_kind, reply_corr, reply = wire.read_frame(sock)
        except (OSError, TransportFaultError) as exc:
            self._drop(addr)
            raise TransportFaultError("unreachable", f"{addr}: {exc}") from exc
        if reply_corr != corr_id:
            self._drop(addr)
            raise TransportFaultError("protocol", "correlation id mismatch")
        if self._capture:
            self._capture("recv", reply_kind, reply)
        if reply_kind == wire.FAULT:
            raise_for_fault(reply)
        return reply

    def addresses(self) -> list[str]:
        return list(self._addresses)

    def close(self) -> None:
        cache = getattr(self._local, "socks", {})
        for sock in cache.values():
            try:
                sock.close()
            except OSError:
                pass
        cache.clear()

"""TCP frame format.

frame := length (4 bytes, big-endian, counts everything after itself)
         version (1 byte)
         kind (1 byte)
         correlation id (8 bytes, big-endian)
         body (codec-encoded dict)

Every request receives exactly one REPLY or FAULT carrying the same
correlation id.
"""

import socket
import struct

from . import codec
from .errors import TransportFaultError

WIRE_VERSION = 1

LOCATE = 1
OPEN_PROXY = 2
INVOKE = 3
TXN_CTRL = 4
HEARTBEAT = 5
REPLY = 6
FAULT = 7

KIND_NAMES = {
    LOCATE: "LOCATE", OPEN_PROXY: "OPEN_PROXY", INVOKE: "INVOKE",
    TXN_CTRL: "TXN_CTRL", HEARTBEAT: "HEARTBEAT", REPLY: "REPLY",
    FAULT: "FAULT",
}

_HEADER = struct.Struct("!BBQ")  # version, kind, correlation id
_MAX_FRAME = 64 * 1024 * 1024


def encode_frame(kind: int, corr_id: int, body: dict) -> bytes:
    payload = codec.encode(body)
    inner = _HEADER.pack(WIRE_VERSION, kind, corr_id) + payload
    return struct.pack("!I", len(inner)) + inner


def read_frame(sock: socket.socket) -> tuple[int, int, dict]:
    """Read one frame; returns (kind, corr_id, body). Raises
    TransportFaultError on a closed or corrupt stream."""
    header = _read_exact(sock, 4)
    (length,) = struct.unpack("!I", header)
    if not 0 < length <= _MAX_FRAME:
        raise TransportFaultError("protocol", f"bad frame length {length}")
    inner = _read_exact(sock, length)
    version, kind, corr_id = _HEADER.unpack_from(inner)
    if version != WIRE_VERSION:
        raise TransportFaultError("protocol", f"unsupported wire version {version}")
    body = codec.decode(inner[_HEADER.size:])
    if not isinstance(body, dict):
        raise TransportFaultError("protocol", "frame body must be a dict")
    return kind, corr_id, body


def _read_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise TransportFaultError("closed", "connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)

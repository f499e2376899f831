"""Self-describing binary value encoding.

Used for three things: object state snapshots (checkpoints are an
encode/decode roundtrip, which guarantees deep isolation), wire message
bodies, and restore payloads. The format is tag-driven: every value is a
one-byte type tag followed by its payload. Dict keys are field names and must
be strings. Roundtrip fidelity is the contract; byte-for-byte stability
across versions is not.

Supported values: None, bool, int, float, str, bytes, list, tuple, dict.
"""

import struct

from .errors import StateCopyError

_TAG_NONE = b"N"
_TAG_TRUE = b"T"
_TAG_FALSE = b"F"
_TAG_INT = b"i"       # fits in signed 64-bit
_TAG_BIGINT = b"I"    # arbitrary precision, length-prefixed
_TAG_FLOAT = b"f"
_TAG_STR = b"s"
_TAG_BYTES = b"b"
_TAG_LIST = b"l"
_TAG_TUPLE = b"u"
_TAG_DICT = b"d"

_I64_MIN = -(1 << 63)
_I64_MAX = (1 << 63) - 1


def encode(value) -> bytes:
    out = bytearray()
    _encode_into(out, value)
    return bytes(out)


def _encode_into(out: bytearray, value) -> None:
    if value is None:
        out += _TAG_NONE
    elif value is True:
        out += _TAG_TRUE
    elif value is False:
        out += _TAG_FALSE
    elif isinstance(value, int):
        if _I64_MIN <= value <= _I64_MAX:
            out += _TAG_INT
            out += struct.pack("!q", value)
        else:
            raw = value.to_bytes((value.bit_length() + 8) // 8, "big", signed=True)
            out += _TAG_BIGINT
            out += struct.pack("!I", len(raw))
            out += raw
    elif isinstance(value, float):
        out += _TAG_FLOAT
        out += struct.pack("!d", value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out += _TAG_STR
        out += struct.pack("!I", len(raw))
        out += raw
    elif isinstance(value, bytes):
        out += _TAG_BYTES
        out += struct.pack("!I", len(value))
        out += value
    elif isinstance(value, list):
        out += _TAG_LIST
        out += struct.pack("!I", len(value))
        for item in value:
            _encode_into(out, item)
    elif isinstance(value, tuple):
        out += _TAG_TUPLE
        out += struct.pack("!I", len(value))
        for item in value:
            _encode_into(out, item)
    elif isinstance(value, dict):
        out += _TAG_DICT
        out += struct.pack("!I", len(value))
        for key, item in value.items():
            if not isinstance(key, str):
                raise StateCopyError(f"dict keys must be field-name strings, got {key!r}")
            raw = key.encode("utf-8")
            out += struct.pack("!I", len(raw))
            out += raw
            _encode_into(out, item)
    else:
        raise StateCopyError(f"value of type {type(value).__name__} is not encodable")


def decode(data: bytes):
    value, offset = _decode_from(data, 0)
    if offset != len(data):
        raise StateCopyError(f"{len(data) - offset} trailing bytes after value")
    return value


def _decode_from(data: bytes, offset: int):
    tag = data[offset:offset + 1]
    offset += 1
    if tag == _TAG_NONE:
        return None, offset
    if tag == _TAG_TRUE:
        return True, offset
    if tag == _TAG_FALSE:
        return False, offset
    if tag == _TAG_INT:
        (value,) = struct.unpack_from("!q", data, offset)
        return value, offset + 8
    if tag == _TAG_BIGINT:
        (length,) = struct.unpack_from("!I", data, offset)
        offset += 4
        raw = data[offset:offset + length]
        return int.from_bytes(raw, "big", signed=True), offset + length
    if tag == _TAG_FLOAT:
        (value,) = struct.unpack_from("!d", data, offset)
        return value, offset + 8
    if tag == _TAG_STR:
        (length,) = struct.unpack_from("!I", data, offset)
        offset += 4
        return data[offset:offset + length].decode("utf-8"), offset + length
    if tag == _TAG_BYTES:
        (length,) = struct.unpack_from("!I", data, offset)
        offset += 4
        return data[offset:offset + length], offset + length
    if tag in (_TAG_LIST, _TAG_TUPLE):
        (count,) = struct.unpack_from("!I", data, offset)
        offset += 4
        items = []
        for _ in range(count):
            item, offset = _decode_from(data, offset)
            items.append(item)
        return (tuple(items) if tag == _TAG_TUPLE else items), offset
    if tag == _TAG_DICT:
        (count,) = struct.unpack_from("!I", data, offset)
        offset += 4
        result = {}
        for _ in range(count):
            (length,) = struct.unpack_from("!I", data, offset)
            offset += 4
            key = data[offset:offset + length].decode("utf-8")
            offset += length
            result[key], offset = _decode_from(data, offset)
        return result, offset
    raise StateCopyError(f"unknown type tag {tag!r} at byte {offset - 1}")


def deep_copy(value):
    """Isolated copy via an encode/decode roundtrip."""
    return decode(encode(value))

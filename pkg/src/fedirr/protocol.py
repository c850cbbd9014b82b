"""Wire protocol between edge nodes and the aggregation server.

Each message travels as one frame: a 4-byte big-endian unsigned length
followed by that many bytes of UTF-8 JSON. The JSON object always starts
with a ``"type"`` tag; remaining keys follow the dataclass field order.
See PROTOCOL.md for byte-level examples.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, fields
from typing import Union

from .errors import (CleanClose, ConnectionClosed, EncodeError, FrameTooLarge,
                     MalformedPayload, SchemaViolation, UnknownType)

MAX_FRAME = 1_048_576
_HEADER = struct.Struct("!I")


@dataclass(frozen=True)
class CfgEcho:
    local_epochs: int
    learning_rate: float


@dataclass(frozen=True)
class Register:
    client_id: str
    feature_dim: int


@dataclass(frozen=True)
class RegisterAck:
    accepted: bool
    round: int


@dataclass(frozen=True)
class RoundStart:
    round: int
    global_weights: tuple[float, ...]
    cfg_echo: CfgEcho


@dataclass(frozen=True)
class ClientUpdateMsg:
    client_id: str
    round: int
    weights: tuple[float, ...]
    sample_count: int
    local_loss: float


@dataclass(frozen=True)
class GlobalModelMsg:
    round: int
    weights: tuple[float, ...]
    converged: bool


@dataclass(frozen=True)
class Heartbeat:
    client_id: str


@dataclass(frozen=True)
class Error:
    code: str
    detail: str


Message = Union[Register, RegisterAck, RoundStart, ClientUpdateMsg, GlobalModelMsg,
                Heartbeat, Error]

TYPE_TAGS = {
    Register: "register",
    RegisterAck: "register_ack",
    RoundStart: "round_start",
    ClientUpdateMsg: "client_update",
    GlobalModelMsg: "global_model",
    Heartbeat: "heartbeat",
    Error: "error",
}
_BY_TAG = {tag: cls for cls, tag in TYPE_TAGS.items()}

# field kinds used for both encoding checks and decoding
_SCHEMA = {
    Register: {"client_id": "str", "feature_dim": "count"},
    RegisterAck: {"accepted": "bool", "round": "count"},
    RoundStart: {"round": "count", "global_weights": "weights", "cfg_echo": "cfg"},
    ClientUpdateMsg: {"client_id": "str", "round": "count", "weights": "weights",
                      "sample_count": "count", "local_loss": "float"},
    GlobalModelMsg: {"round": "count", "weights": "weights", "converged": "bool"},
    Heartbeat: {"client_id": "str"},
    Error: {"code": "str", "detail": "str"},
}


def _encode_value(kind: str, value, name: str):
    if kind == "weights":
        out = [float(v) for v in value]
        if not all(math.isfinite(v) for v in out):
            raise EncodeError(f"{name} contains non-finite values")
        return out
    if kind == "float":
        value = float(value)
        if not math.isfinite(value):
            raise EncodeError(f"{name} is not finite")
        return value
    if kind == "cfg":
        return {"local_epochs": int(value.local_epochs),
                "learning_rate": _encode_value("float", value.learning_rate, "learning_rate")}
    if kind == "count":
        if int(value) < 0:
            raise EncodeError(f"{name} must be >= 0")
        return int(value)
    if kind == "bool":
        return bool(value)
    return str(value)


def to_dict(msg: Message) -> dict:
    cls = type(msg)
    if cls not in TYPE_TAGS:
        raise EncodeError(f"not a protocol message: {msg!r}")
    out = {"type": TYPE_TAGS[cls]}
    for f in fields(cls):
        out[f.name] = _encode_value(_SCHEMA[cls][f.name], getattr(msg, f.name), f.name)
    return out


def encode(msg: Message) -> bytes:
    """Canonical JSON payload bytes for ``msg`` (no frame header)."""
    try:
        text = json.dumps(to_dict(msg), separators=(",", ":"), ensure_ascii=False,
                          allow_nan=False)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, EncodeError):
            raise
        raise EncodeError(str(exc)) from exc
    return text.encode("utf-8")


def _reject_constant(name):
    raise MalformedPayload(f"non-finite number {name} in payload")


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _decode_value(kind: str, value, name: str):
    if kind == "str":
        if not isinstance(value, str):
            raise SchemaViolation(f"{name} must be a string")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise SchemaViolation(f"{name} must be a boolean")
        return value
    if kind == "count":
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise SchemaViolation(f"{name} must be a non-negative integer")
        return value
    if kind == "float":
        if not _is_number(value):
            raise SchemaViolation(f"{name} must be a number")
        return float(value)
    if kind == "weights":
        if not isinstance(value, list) or not all(_is_number(v) for v in value):
            raise SchemaViolation(f"{name} must be an array of numbers")
        return tuple(float(v) for v in value)
    if kind == "cfg":
        if not isinstance(value, dict):
            raise SchemaViolation(f"{name} must be an object")
        missing = {"local_epochs", "learning_rate"} - value.keys()
        if missing:
            raise SchemaViolation(f"{name} missing {sorted(missing)}")
        return CfgEcho(local_epochs=_decode_value("count", value["local_epochs"], "local_epochs"),
                       learning_rate=_decode_value("float", value["learning_rate"], "learning_rate"))
    raise AssertionError(kind)


def from_dict(obj) -> Message:
    if not isinstance(obj, dict):
        raise SchemaViolation("payload must be a JSON object")
    tag = obj.get("type")
    if not isinstance(tag, str):
        raise SchemaViolation("missing 'type' tag")
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise UnknownType(f"unknown message type {tag!r}")
    kwargs = {}
    for name, kind in _SCHEMA[cls].items():
        if name not in obj:
            raise SchemaViolation(f"{tag}: missing field {name!r}")
        kwargs[name] = _decode_value(kind, obj[name], f"{tag}.{name}")
    return cls(**kwargs)


def decode(payload: bytes) -> Message:
    """Parse payload bytes; unknown fields are ignored, unknown types rejected."""
    try:
        text = bytes(payload).decode("utf-8")
        obj = json.loads(text, parse_constant=_reject_constant)
    except UnicodeDecodeError as exc:
        raise MalformedPayload(f"payload is not UTF-8: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedPayload(f"bad JSON: {exc}") from exc
    return from_dict(obj)


# -- framing -------------------------------------------------------------------

def _read_chunk(stream, n: int) -> bytes:
    if hasattr(stream, "recv"):
        return stream.recv(n)
    return stream.read(n)


def _read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = _read_chunk(stream, n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def frame_write(stream, payload: bytes) -> None:
    if len(payload) > MAX_FRAME:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_FRAME}")
    data = _HEADER.pack(len(payload)) + payload
    if hasattr(stream, "sendall"):
        stream.sendall(data)
    else:
        stream.write(data)
        flush = getattr(stream, "flush", None)
        if flush is not None:
            flush()


def frame_read(stream) -> bytes:
    """Block until one whole frame arrives and return its payload."""
    header = _read_exact(stream, _HEADER.size)
    if not header:
        raise CleanClose("peer closed the connection")
    if len(header) < _HEADER.size:
        raise ConnectionClosed("connection closed inside a frame header")
    (length,) = _HEADER.unpack(header)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"declared frame length {length} exceeds {MAX_FRAME}")
    payload = _read_exact(stream, length)
    if len(payload) < length:
        raise ConnectionClosed(f"connection closed after {len(payload)} of {length} payload bytes")
    return payload


def send_message(stream, msg: Message) -> None:
    frame_write(stream, encode(msg))


def recv_message(stream) -> Message:
    return decode(frame_read(stream))

"""Binary encoding of model parameters and the length-prefixed frame protocol.

Frame header (big-endian): ``b"FFL1"`` magic, ``u8`` message type, ``u64``
payload length. Payload fields are little-endian.

Parameter block: ``u32`` tensor count, then per tensor ``u16`` name length,
UTF-8 name, ``u8`` dtype tag (0 = float32), ``u8`` rank, ``rank x u32`` dims
and the raw little-endian float32 data.
"""

from __future__ import annotations

import json
import math
import socket
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Union

import numpy as np

from ..imaging import write_atomic
from ..metrics import RoundMetrics
from ..model import ModelParams, validate_name

MAGIC = b"FFL1"
HEADER = struct.Struct(">4sBQ")
MAX_PAYLOAD = 1 << 30
DTYPE_F32 = 0

_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_METRICS = struct.Struct("<4d")


class ProtocolError(Exception):
    """Malformed frame, payload or message sequence."""


class ConnectionClosed(ProtocolError, ConnectionError):
    """Peer hung up, possibly mid-frame."""


class MsgType(IntEnum):
    JOIN_REQUEST = 0x01
    JOIN_ACK = 0x02
    FIT_INSTRUCTION = 0x03
    FIT_RESULT = 0x04
    EVALUATE_INSTRUCTION = 0x05
    EVALUATE_RESULT = 0x06
    SHUTDOWN = 0x07
    ERROR = 0x7F


# privacy contract: nothing else may cross the wire in either direction
CLIENT_TO_SERVER = frozenset({MsgType.JOIN_REQUEST, MsgType.FIT_RESULT, MsgType.EVALUATE_RESULT, MsgType.ERROR})
SERVER_TO_CLIENT = frozenset({MsgType.JOIN_ACK, MsgType.FIT_INSTRUCTION, MsgType.EVALUATE_INSTRUCTION,
                              MsgType.SHUTDOWN, MsgType.ERROR})


# --------------------------------------------------------------------------
# parameters


def serialize_params(params: ModelParams) -> bytes:
    parts = [_U32.pack(len(params))]
    for name, tensor in params.items():
        validate_name(name)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"tensor name longer than 65535 bytes: {name[:32]}...")
        arr = np.asarray(tensor, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(_U16.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(bytes([DTYPE_F32, arr.ndim]))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _take(buf: memoryview, pos: int, n: int) -> tuple[memoryview, int]:
    if n < 0 or pos + n > len(buf):
        raise ProtocolError("parameter block truncated")
    return buf[pos:pos + n], pos + n


def deserialize_params(data: bytes, offset: int = 0) -> tuple[ModelParams, int]:
    """Decode a parameter block; returns the params and the end offset."""
    buf = memoryview(data)
    chunk, pos = _take(buf, offset, 4)
    (count,) = _U32.unpack(chunk)
    params: ModelParams = {}
    for _ in range(count):
        chunk, pos = _take(buf, pos, 2)
        (name_len,) = _U16.unpack(chunk)
        chunk, pos = _take(buf, pos, name_len)
        try:
            name = bytes(chunk).decode("utf-8")
            validate_name(name)
        except (UnicodeDecodeError, ValueError) as exc:
            raise ProtocolError(f"bad tensor name: {exc}") from exc
        if name in params:
            raise ProtocolError(f"duplicate tensor name {name!r}")
        chunk, pos = _take(buf, pos, 2)
        dtype, rank = chunk[0], chunk[1]
        if dtype != DTYPE_F32:
            raise ProtocolError(f"unsupported dtype tag {dtype}")
        chunk, pos = _take(buf, pos, 4 * rank)
        shape = struct.unpack(f"<{rank}I", chunk)
        n = math.prod(shape)
        chunk, pos = _take(buf, pos, 4 * n)
        params[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
    return params, pos


def params_from_bytes(data: bytes) -> ModelParams:
    params, end = deserialize_params(data)
    if end != len(data):
        raise ProtocolError(f"{len(data) - end} trailing bytes after parameter block")
    return params


def save_checkpoint(path, params: ModelParams) -> Path:
    return write_atomic(path, serialize_params(params))


def load_checkpoint(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# frames


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError("payload too large")
    return HEADER.pack(MAGIC, int(msg_type), len(payload)) + payload


def _check_header(header: bytes) -> tuple[MsgType, int]:
    magic, raw_type, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    try:
        msg_type = MsgType(raw_type)
    except ValueError as exc:
        raise ProtocolError(f"unknown message type 0x{raw_type:02x}") from exc
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload length {length} exceeds limit")
    return msg_type, length


def decode_frame(data: bytes) -> tuple[MsgType, bytes]:
    """Decode exactly one frame from ``data``."""
    if len(data) < HEADER.size:
        raise ProtocolError("frame shorter than header")
    msg_type, length = _check_header(data[:HEADER.size])
    payload = data[HEADER.size:]
    if len(payload) != length:
        raise ProtocolError(f"payload length {len(payload)} does not match header {length}")
    return msg_type, bytes(payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ConnectionClosed(f"connection closed by peer with {remaining} of {n} bytes unread")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[MsgType, bytes]:
    msg_type, length = _check_header(_recv_exact(sock, HEADER.size))
    return msg_type, _recv_exact(sock, length)


# --------------------------------------------------------------------------
# messages


@dataclass
class JoinRequest:
    name: str = ""


@dataclass
class JoinAck:
    client_id: int


@dataclass
class FitInstruction:
    round: int
    params: ModelParams
    config: dict = field(default_factory=dict)


@dataclass
class FitResult:
    round: int
    params: ModelParams
    num_samples: int
    metrics: RoundMetrics


@dataclass
class EvaluateInstruction:
    round: int
    n_samples: int
    params: ModelParams


@dataclass
class EvaluateResult:
    round: int
    num_samples: int
    metrics: RoundMetrics


@dataclass
class Shutdown:
    params: ModelParams


@dataclass
class Error:
    text: str


Message = Union[JoinRequest, JoinAck, FitInstruction, FitResult, EvaluateInstruction, EvaluateResult, Shutdown, Error]

_TYPE_OF = {
    JoinRequest: MsgType.JOIN_REQUEST, JoinAck: MsgType.JOIN_ACK, FitInstruction: MsgType.FIT_INSTRUCTION,
    FitResult: MsgType.FIT_RESULT, EvaluateInstruction: MsgType.EVALUATE_INSTRUCTION,
    EvaluateResult: MsgType.EVALUATE_RESULT, Shutdown: MsgType.SHUTDOWN, Error: MsgType.ERROR,
}


def _metrics_bytes(m: RoundMetrics) -> bytes:
    return _METRICS.pack(m.loss, m.iou, m.dice, m.pixel_accuracy)


def _metrics_from(buf: bytes, pos: int) -> tuple[RoundMetrics, int]:
    if pos + _METRICS.size > len(buf):
        raise ProtocolError("metrics truncated")
    loss, iou, dice, pa = _METRICS.unpack_from(buf, pos)
    try:
        return RoundMetrics(loss, iou, dice, pa), pos + _METRICS.size
    except ValueError as exc:
        raise ProtocolError(str(exc)) from exc


def encode_message(msg: Message) -> bytes:
    """Full frame bytes for ``msg``."""
    t = _TYPE_OF[type(msg)]
    if t is MsgType.JOIN_REQUEST:
        payload = msg.name.encode("utf-8")
    elif t is MsgType.JOIN_ACK:
        payload = _U32.pack(msg.client_id)
    elif t is MsgType.FIT_INSTRUCTION:
        cfg = json.dumps(msg.config, sort_keys=True).encode("utf-8")
        payload = struct.pack("<II", msg.round, len(cfg)) + cfg + serialize_params(msg.params)
    elif t is MsgType.FIT_RESULT:
        payload = struct.pack("<IQ", msg.round, msg.num_samples) + _metrics_bytes(msg.metrics) \
            + serialize_params(msg.params)
    elif t is MsgType.EVALUATE_INSTRUCTION:
        payload = struct.pack("<II", msg.round, msg.n_samples) + serialize_params(msg.params)
    elif t is MsgType.EVALUATE_RESULT:
        payload = struct.pack("<IQ", msg.round, msg.num_samples) + _metrics_bytes(msg.metrics)
    elif t is MsgType.SHUTDOWN:
        payload = serialize_params(msg.params)
    else:
        payload = msg.text.encode("utf-8")
    return encode_frame(t, payload)


def decode_message(msg_type: MsgType, payload: bytes) -> Message:
    try:
        if msg_type is MsgType.JOIN_REQUEST:
            return JoinRequest(payload.decode("utf-8"))
        if msg_type is MsgType.JOIN_ACK:
            _exact(payload, 4)
            return JoinAck(_U32.unpack(payload)[0])
        if msg_type is MsgType.FIT_INSTRUCTION:
            _atleast(payload, 8)
            rnd, cfg_len = struct.unpack_from("<II", payload)
            _atleast(payload, 8 + cfg_len)
            cfg = json.loads(payload[8:8 + cfg_len].decode("utf-8"))
            if not isinstance(cfg, dict):
                raise ProtocolError("fit config must be an object")
            return FitInstruction(rnd, params_from_bytes(payload[8 + cfg_len:]), cfg)
        if msg_type is MsgType.FIT_RESULT:
            _atleast(payload, 12)
            rnd, n = struct.unpack_from("<IQ", payload)
            metrics, pos = _metrics_from(payload, 12)
            return FitResult(rnd, params_from_bytes(payload[pos:]), n, metrics)
        if msg_type is MsgType.EVALUATE_INSTRUCTION:
            _atleast(payload, 8)
            rnd, n = struct.unpack_from("<II", payload)
            return EvaluateInstruction(rnd, n, params_from_bytes(payload[8:]))
        if msg_type is MsgType.EVALUATE_RESULT:
            _exact(payload, 12 + _METRICS.size)
            rnd, n = struct.unpack_from("<IQ", payload)
            metrics, _ = _metrics_from(payload, 12)
            return EvaluateResult(rnd, n, metrics)
        if msg_type is MsgType.SHUTDOWN:
            return Shutdown(params_from_bytes(payload))
        if msg_type is MsgType.ERROR:
            return Error(payload.decode("utf-8", errors="replace"))
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error) as exc:
        raise ProtocolError(f"malformed {msg_type.name} payload: {exc}") from exc
    raise ProtocolError(f"unhandled message type {msg_type!r}")


def _exact(payload: bytes, n: int) -> None:
    if len(payload) != n:
        raise ProtocolError(f"expected {n} payload bytes, got {len(payload)}")


def _atleast(payload: bytes, n: int) -> None:
    if len(payload) < n:
        raise ProtocolError(f"payload truncated ({len(payload)} < {n} bytes)")


class Connection:
    """A socket speaking framed messages, restricted to one direction's whitelist."""

    def __init__(self, sock: socket.socket, outgoing: frozenset, incoming: frozenset):
        self.sock = sock
        self.outgoing = outgoing
        self.incoming = incoming
        self.sent: list[tuple[MsgType, int]] = []
        self.received: list[tuple[MsgType, int]] = []

    def send(self, msg: Message) -> None:
        frame = encode_message(msg)
        t = MsgType(frame[4])
        if t not in self.outgoing:
            raise ProtocolError(f"{t.name} may not be sent in this direction")
        self.sock.sendall(frame)
        self.sent.append((t, len(frame) - HEADER.size))

    def recv(self, timeout: float | None = None) -> Message:
        self.sock.settimeout(timeout)
        t, payload = read_frame(self.sock)
        if t not in self.incoming:
            raise ProtocolError(f"unexpected {t.name} in this direction")
        self.received.append((t, len(payload)))
        return decode_message(t, payload)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

"""Length-prefixed binary protocol between the FL server and its clients.

Frame layout (all little-endian):

    u32 length | u8 tag | payload         length covers tag + payload

Tags: Hello=1, HelloAck=2, FitRequest=3, FitResponse=4, EvalRequest=5,
EvalResponse=6, Shutdown=7, Error=8. Integers are u32, reals f32, strings
u16 length + UTF-8 bytes. Parameter vectors use their own self-delimiting
encoding (see ParamVector.to_bytes). Float fields are rounded to f32 at
construction so decode(encode(m)) == m holds for every constructible
message.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

import numpy as np

from fedbed.model import ParamVector

MAX_FRAME = 1 << 28  # 256 MiB; anything larger is treated as a corrupt length


class ProtocolError(ValueError):
    """Raised for any malformed frame; the decoder never raises anything else."""


def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass
class Hello:
    client_id: int
    width_ratio: float = 1.0

    def __post_init__(self):
        self.width_ratio = _f32(self.width_ratio)


@dataclass
class HelloAck:
    client_id: int


@dataclass
class FitRequest:
    round: int
    config: dict[str, str]
    params: ParamVector


@dataclass
class FitResponse:
    round: int
    num_examples: int
    train_loss: float
    busy_s: float  # deterministic emulated time the client spent on this round
    params: ParamVector

    def __post_init__(self):
        self.train_loss = _f32(self.train_loss)
        self.busy_s = _f32(self.busy_s)


@dataclass
class EvalRequest:
    round: int
    params: ParamVector


@dataclass
class EvalResponse:
    round: int
    num_examples: int
    loss: float
    accuracy: float
    busy_s: float

    def __post_init__(self):
        self.loss = _f32(self.loss)
        self.accuracy = _f32(self.accuracy)
        self.busy_s = _f32(self.busy_s)


@dataclass
class Shutdown:
    pass


@dataclass
class ErrorMsg:
    message: str


Message = Hello | HelloAck | FitRequest | FitResponse | EvalRequest | EvalResponse | Shutdown | ErrorMsg

_TAG_OF = {
    Hello: 1,
    HelloAck: 2,
    FitRequest: 3,
    FitResponse: 4,
    EvalRequest: 5,
    EvalResponse: 6,
    Shutdown: 7,
    ErrorMsg: 8,
}


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for u16 length prefix")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    if len(buf) - off < 2:
        raise ProtocolError("truncated string length")
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    if len(buf) - off < n:
        raise ProtocolError("truncated string body")
    try:
        return buf[off : off + n].decode("utf-8"), off + n
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"invalid UTF-8 in string: {exc}") from exc


def _encode_payload(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        return struct.pack("<If", msg.client_id, msg.width_ratio)
    if isinstance(msg, HelloAck):
        return struct.pack("<I", msg.client_id)
    if isinstance(msg, FitRequest):
        out = struct.pack("<IH", msg.round, len(msg.config))
        for key in sorted(msg.config):
            out += _pack_str(key) + _pack_str(msg.config[key])
        return out + msg.params.to_bytes()
    if isinstance(msg, FitResponse):
        head = struct.pack("<IIff", msg.round, msg.num_examples, msg.train_loss, msg.busy_s)
        return head + msg.params.to_bytes()
    if isinstance(msg, EvalRequest):
        return struct.pack("<I", msg.round) + msg.params.to_bytes()
    if isinstance(msg, EvalResponse):
        return struct.pack(
            "<IIfff", msg.round, msg.num_examples, msg.loss, msg.accuracy, msg.busy_s
        )
    if isinstance(msg, Shutdown):
        return b""
    if isinstance(msg, ErrorMsg):
        return _pack_str(msg.message)
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def encode(msg: Message) -> bytes:
    """Full frame bytes for one message."""
    body = bytes([_TAG_OF[type(msg)]]) + _encode_payload(msg)
    if len(body) > MAX_FRAME:
        raise ValueError("message exceeds maximum frame size")
    return struct.pack("<I", len(body)) + body


def _params_at(buf: bytes, off: int) -> tuple[ParamVector, int]:
    try:
        return ParamVector.from_bytes(buf, off)
    except ValueError as exc:
        raise ProtocolError(f"bad parameter block: {exc}") from exc


def _decode_payload(tag: int, buf: bytes) -> Message:
    try:
        if tag == 1:
            cid, ratio = struct.unpack("<If", buf)
            return Hello(cid, ratio)
        if tag == 2:
            (cid,) = struct.unpack("<I", buf)
            return HelloAck(cid)
        if tag == 3:
            rnd, npairs = struct.unpack_from("<IH", buf, 0)
            off = 6
            config = {}
            for _ in range(npairs):
                key, off = _unpack_str(buf, off)
                val, off = _unpack_str(buf, off)
                config[key] = val
            params, off = _params_at(buf, off)
            if off != len(buf):
                raise ProtocolError("trailing bytes after FitRequest payload")
            return FitRequest(rnd, config, params)
        if tag == 4:
            rnd, n, loss, busy = struct.unpack_from("<IIff", buf, 0)
            params, off = _params_at(buf, 16)
            if off != len(buf):
                raise ProtocolError("trailing bytes after FitResponse payload")
            return FitResponse(rnd, n, loss, busy, params)
        if tag == 5:
            (rnd,) = struct.unpack_from("<I", buf, 0)
            params, off = _params_at(buf, 4)
            if off != len(buf):
                raise ProtocolError("trailing bytes after EvalRequest payload")
            return EvalRequest(rnd, params)
        if tag == 6:
            rnd, n, loss, acc, busy = struct.unpack("<IIfff", buf)
            return EvalResponse(rnd, n, loss, acc, busy)
        if tag == 7:
            if buf:
                raise ProtocolError("Shutdown carries no payload")
            return Shutdown()
        if tag == 8:
            message, off = _unpack_str(buf, 0)
            if off != len(buf):
                raise ProtocolError("trailing bytes after Error payload")
            return ErrorMsg(message)
    except struct.error as exc:
        raise ProtocolError(f"truncated payload for tag {tag}: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, ProtocolError):
            raise
        raise ProtocolError(str(exc)) from exc
    raise ProtocolError(f"unknown message tag {tag}")


def decode(frame: bytes) -> Message:
    """Decode one complete frame; raises ProtocolError on any malformation."""
    if len(frame) < 5:
        raise ProtocolError(f"frame too short ({len(frame)} bytes)")
    (length,) = struct.unpack_from("<I", frame, 0)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame length {length} exceeds limit")
    if length != len(frame) - 4:
        raise ProtocolError(f"frame length field {length} != body size {len(frame) - 4}")
    return _decode_payload(frame[4], frame[5:])


class ConnectionClosed(ConnectionError):
    pass


class FramedConnection:
    """A socket speaking whole frames, with cumulative byte counters.

    The counters are plain ints read by the metrics scraper from another
    thread; CPython attribute access keeps that safe without a lock.
    """

    def __init__(self, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.bytes_sent = 0
        self.bytes_received = 0
        self.last_frame_bytes = 0

    def send(self, msg: Message) -> int:
        return self.send_frame(encode(msg))

    def send_frame(self, frame: bytes) -> int:
        self.sock.sendall(frame)
        self.bytes_sent += len(frame)
        return len(frame)

    def _recv_exact(self, n: int) -> bytes | None:
        chunks = []
        remaining = n
        while remaining:
            chunk = self.sock.recv(remaining)
            if not chunk:
                if remaining == n and not chunks:
                    return None  # clean EOF at a frame boundary
                raise ProtocolError("connection closed mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv(self) -> Message | None:
        """Next message, or None on clean EOF."""
        head = self._recv_exact(4)
        if head is None:
            return None
        (length,) = struct.unpack("<I", head)
        if not (1 <= length <= MAX_FRAME):
            raise ProtocolError(f"bad frame length {length}")
        body = self._recv_exact(length)
        if body is None:
            raise ProtocolError("connection closed before frame body")
        self.bytes_received += 4 + length
        self.last_frame_bytes = 4 + length
        return _decode_payload(body[0], body[1:])

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

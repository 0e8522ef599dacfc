"""Length-prefixed binary frames for cross-process federation.

Frame: 4-byte big-endian payload length, then the payload

    version (1 byte, 0x01) | type (1 byte) | round id (u32 BE) | client id (u32 BE)
    | actor count (u32 BE) | actor doubles (f64 LE) ...
    | critic count (u32 BE) | critic doubles (f64 LE) ...

Only the fields above travel on the wire; an update's sample count and local
statistics stay with the client.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

from .agent import GradientUpdate, PolicyParams
from .errors import FramingError, ProtocolError

VERSION = 0x01
MSG_UPDATE = 0x01
MSG_GLOBAL_MODEL = 0x02
MSG_ROUND_BEGIN = 0x03
MSG_TYPES = (MSG_UPDATE, MSG_GLOBAL_MODEL, MSG_ROUND_BEGIN)

HEADER = struct.Struct(">I")
FIXED = struct.Struct(">BBII")
MAX_FRAME = 1 << 30


@dataclass(eq=False)
class Message:
    msg_type: int
    round_id: int
    client_id: int
    actor: np.ndarray
    critic: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        return (self.msg_type, self.round_id, self.client_id) == (other.msg_type, other.round_id, other.client_id) \
            and self.actor.tobytes() == other.actor.tobytes() and self.critic.tobytes() == other.critic.tobytes()

    __hash__ = None


def encode_message(msg: Message) -> bytes:
    if msg.msg_type not in MSG_TYPES:
        raise ProtocolError(f"unknown message type {msg.msg_type:#x}")
    actor = np.ascontiguousarray(msg.actor, dtype="<f8")
    critic = np.ascontiguousarray(msg.critic, dtype="<f8")
    payload = b"".join([
        FIXED.pack(VERSION, msg.msg_type, msg.round_id, msg.client_id),
        HEADER.pack(actor.size), actor.tobytes(),
        HEADER.pack(critic.size), critic.tobytes(),
    ])
    if len(payload) > MAX_FRAME:
        raise FramingError("payload exceeds maximum frame size")
    return HEADER.pack(len(payload)) + payload


def _decode_payload(payload: bytes) -> Message:
    if len(payload) < FIXED.size:
        raise ProtocolError("payload shorter than fixed header")
    version, msg_type, round_id, client_id = FIXED.unpack_from(payload)
    if version != VERSION:
        raise ProtocolError(f"protocol version mismatch: got {version:#x}, expected {VERSION:#x}")
    if msg_type not in MSG_TYPES:
        raise ProtocolError(f"unknown message type {msg_type:#x}")
    off = FIXED.size
    arrays = []
    for name in ("actor", "critic"):
        if len(payload) < off + HEADER.size:
            raise ProtocolError(f"truncated {name} length")
        (count,) = HEADER.unpack_from(payload, off)
        off += HEADER.size
        end = off + 8 * count
        if end > len(payload):
            raise ProtocolError(f"{name} array runs past end of payload")
        arrays.append(np.frombuffer(payload, dtype="<f8", count=count, offset=off).astype(np.float64))
        off = end
    if off != len(payload):
        raise ProtocolError(f"{len(payload) - off} trailing bytes in payload")
    return Message(msg_type, round_id, client_id, arrays[0], arrays[1])


def decode_frame(buf: bytes) -> tuple[Message, int]:
    """Decode one frame from the start of ``buf``; returns (message, bytes consumed)."""
    if len(buf) < HEADER.size:
        raise FramingError("truncated length prefix")
    (n,) = HEADER.unpack_from(buf)
    if n > MAX_FRAME:
        raise FramingError(f"frame length {n} exceeds limit {MAX_FRAME}")
    if len(buf) < HEADER.size + n:
        raise FramingError(f"truncated frame: need {n} payload bytes, have {len(buf) - HEADER.size}")
    return _decode_payload(bytes(buf[HEADER.size:HEADER.size + n])), HEADER.size + n


def encode_update(update: GradientUpdate) -> bytes:
    return encode_message(Message(MSG_UPDATE, update.round_id, update.client_id, update.actor, update.critic))


def decode_update(frame: bytes) -> GradientUpdate:
    msg, used = decode_frame(frame)
    if used != len(frame):
        raise FramingError("extra bytes after frame")
    if msg.msg_type != MSG_UPDATE:
        raise ProtocolError(f"expected an update frame, got type {msg.msg_type:#x}")
    return GradientUpdate(msg.actor, msg.critic, client_id=msg.client_id, round_id=msg.round_id)


# -- stream transport ---------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        part = sock.recv(min(n - got, 1 << 20))
        if not part:
            raise FramingError(f"connection closed after {got} of {n} bytes")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def recv_message(sock: socket.socket) -> Message:
    (n,) = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if n > MAX_FRAME:
        raise FramingError(f"frame length {n} exceeds limit {MAX_FRAME}")
    return _decode_payload(_recv_exact(sock, n))


class RemoteClient:
    """Server-side handle for a client reached over a byte stream."""

    def __init__(self, client_id: int, sock: socket.socket):
        self.client_id = client_id
        self.sock = sock

    def local_update(self, params: PolicyParams, hyper, steps: int, round_id: int = 0) -> GradientUpdate:
        # round-begin carries the global iteration counter as its single actor entry
        send_message(self.sock, Message(MSG_ROUND_BEGIN, round_id, self.client_id,
                                        np.array([float(params.iteration)]), np.zeros(0)))
        send_message(self.sock, Message(MSG_GLOBAL_MODEL, round_id, self.client_id, params.actor, params.critic))
        msg = recv_message(self.sock)
        if msg.msg_type != MSG_UPDATE or msg.round_id != round_id:
            raise ProtocolError("unexpected reply to round-begin")
        return GradientUpdate(msg.actor, msg.critic, client_id=msg.client_id, round_id=msg.round_id,
                              sample_count=steps, stats=self._stats_placeholder())

    @staticmethod
    def _stats_placeholder():
        nan = float("nan")
        return {"reward": nan, "critic_loss": nan, "entropy": nan, "beta": nan}


def serve_client(sock: socket.socket, client, template: PolicyParams, hyper, steps: int,
                 rounds: int) -> None:
    """Client-side loop: answer ``rounds`` round-begin/global-model pairs with updates."""
    for _ in range(rounds):
        begin = recv_message(sock)
        if begin.msg_type != MSG_ROUND_BEGIN:
            raise ProtocolError("expected round-begin")
        model = recv_message(sock)
        if model.msg_type != MSG_GLOBAL_MODEL:
            raise ProtocolError("expected global model")
        iteration = int(begin.actor[0]) if begin.actor.size else template.iteration
        params = PolicyParams(template.arch, model.actor, model.critic, iteration)
        update = client.local_update(params, hyper, steps, begin.round_id)
        sock.sendall(encode_update(update))

"""Length-prefixed binary frames and the channels that carry them.

Wire layout (little-endian)::

    u32 payload_length | u8 msg_type | u32 round | u16 client_id | payload
"""

from __future__ import annotations

import enum
import json
import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable

HEADER = struct.Struct("<IBIH")
HEADER_SIZE = HEADER.size  # 11
MAX_PAYLOAD = 2**31


class MsgType(enum.IntEnum):
    REGISTER = 1
    SYNTHETIC_UPLOAD = 2
    MODEL_UPDATE = 3
    GLOBAL_MODEL = 4
    METRICS_REPORT = 5
    SHUTDOWN = 6


class FrameError(ValueError):
    """Base class for undecodable frames."""


class UnknownMessageType(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class LengthMismatch(FrameError):
    pass


class ChannelClosed(ConnectionError):
    pass


class ChannelTimeout(TimeoutError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    round: int
    client_id: int
    payload: bytes = b""

    def json(self):
        return json.loads(self.payload.decode("utf-8"))


def json_payload(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_frame(frame: Frame) -> bytes:
    try:
        mt = MsgType(frame.msg_type)
    except ValueError:
        raise UnknownMessageType(f"unknown msg_type {frame.msg_type}") from None
    if len(frame.payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(frame.payload)} bytes exceeds 2^31")
    if not 0 <= frame.round < 2**32 or not 0 <= frame.client_id < 2**16:
        raise FrameError(f"round {frame.round} or client_id {frame.client_id} out of range")
    return HEADER.pack(len(frame.payload), mt, frame.round, frame.client_id) + bytes(frame.payload)


def _parse_header(head: bytes) -> tuple[int, MsgType, int, int]:
    length, mt, rnd, cid = HEADER.unpack(head)
    try:
        mt = MsgType(mt)
    except ValueError:
        raise UnknownMessageType(f"unknown msg_type {mt}") from None
    if length > MAX_PAYLOAD:
        raise LengthMismatch(f"declared payload length {length} exceeds 2^31")
    return length, mt, rnd, cid


def decode_frame(buf: bytes) -> Frame:
    """Decode exactly one frame; the buffer must hold nothing else."""
    if len(buf) < HEADER_SIZE:
        raise TruncatedFrame(f"need {HEADER_SIZE} header bytes, got {len(buf)}")
    length, mt, rnd, cid = _parse_header(bytes(buf[:HEADER_SIZE]))
    body = len(buf) - HEADER_SIZE
    if body < length:
        raise TruncatedFrame(f"declared payload length {length}, only {body} bytes present")
    if body > length:
        raise LengthMismatch(f"declared payload length {length}, but {body} bytes follow the header")
    return Frame(mt, rnd, cid, bytes(buf[HEADER_SIZE:]))


# ---------------------------------------------------------------------------
# channels


class Endpoint:
    """One side of a bidirectional, FIFO, frame-oriented connection."""

    recorder: Callable[[bytes], None] | None = None

    def send(self, frame: Frame) -> None:
        data = encode_frame(frame)
        if self.recorder is not None:
            self.recorder(data)
        self._send_bytes(data)

    def recv(self, timeout: float | None = None) -> Frame:
        data = self._recv_bytes(timeout)
        if self.recorder is not None:
            self.recorder(data)
        return decode_frame(data)

    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_bytes(self, timeout: float | None) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


_CLOSED = object()


class InProcEndpoint(Endpoint):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False
        self._peer_closed = False

    def _send_bytes(self, data: bytes) -> None:
        if self._closed or self._peer_closed:
            raise ChannelClosed("send on closed channel")
        self._outbox.put(data)

    def _recv_bytes(self, timeout: float | None) -> bytes:
        if self._closed:
            raise ChannelClosed("recv on closed channel")
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ChannelTimeout(f"no frame within {timeout}s") from None
        if item is _CLOSED:
            self._peer_closed = True
            self._inbox.put(_CLOSED)
            raise ChannelClosed("peer closed the channel")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def inproc_pair() -> tuple[InProcEndpoint, InProcEndpoint]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return InProcEndpoint(b_to_a, a_to_b), InProcEndpoint(a_to_b, b_to_a)


class SocketEndpoint(Endpoint):
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._closed = False
        self._send_lock = threading.Lock()

    def _send_bytes(self, data: bytes) -> None:
        if self._closed:
            raise ChannelClosed("send on closed channel")
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as exc:
            raise ChannelClosed(f"send failed: {exc}") from None

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            try:
                chunk = self._sock.recv(min(n, 1 << 20))
            except socket.timeout:
                raise ChannelTimeout("socket receive timed out") from None
            except OSError as exc:
                raise ChannelClosed(f"recv failed: {exc}") from None
            if not chunk:
                raise ChannelClosed("peer closed the connection")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def _recv_bytes(self, timeout: float | None) -> bytes:
        if self._closed:
            raise ChannelClosed("recv on closed channel")
        self._sock.settimeout(timeout)
        head = self._read_exact(HEADER_SIZE)
        length, *_ = _parse_header(head)
        return head + self._read_exact(length)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def socket_pairs(n: int, port: int = 0, host: str = "127.0.0.1") -> list[tuple[SocketEndpoint, SocketEndpoint]]:
    """Open ``n`` loopback TCP connections through one listener bound to ``port``."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        listener.bind((host, port))
        listener.listen(max(n, 1))
        addr = listener.getsockname()
        pairs = []
        for _ in range(n):
            client = socket.create_connection(addr)
            server, _ = listener.accept()
            pairs.append((SocketEndpoint(server), SocketEndpoint(client)))
        return pairs
    finally:
        listener.close()


def make_pairs(backend: str, n: int, port: int = 0) -> list[tuple[Endpoint, Endpoint]]:
    """(server_end, client_end) for each of ``n`` clients."""
    if backend == "inproc":
        return [inproc_pair() for _ in range(n)]
    if backend == "socket":
        return socket_pairs(n, port=port)
    raise ValueError(f"unknown transport backend {backend!r}")

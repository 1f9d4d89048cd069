"""Framed, ordered, reliable channels over TCP sockets or in-process queues.

Wire format, identical on both transports:

    length   u32 little-endian, size of the payload only
    msg_type u8; the high bit marks a continuation chunk (more follow)
    payload  `length` bytes

Payloads larger than the 64 MiB chunk limit are split into consecutive
frames; every chunk except the last carries the continuation bit.  A
single frame's payload may not exceed 2^31 bytes.

Both transports count every frame as 5 + len(payload) bytes in their
ChannelMetrics, and optionally record the exact byte stream they sent
(transcript capture) for golden-transcript tests.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

__all__ = [
    "MSG_PARAMS",
    "MSG_KEY",
    "MSG_OT",
    "MSG_DELTA",
    "MSG_GAMMA_DELTA",
    "MSG_PSI",
    "MSG_ABORT",
    "MSG_NAMES",
    "FRAME_HEADER_BYTES",
    "CHUNK_BYTES",
    "MAX_PAYLOAD_BYTES",
    "TransportError",
    "ChannelClosed",
    "ChannelTimeout",
    "ProtocolError",
    "ProtocolAbort",
    "ChannelMetrics",
    "Channel",
    "InMemoryChannel",
    "SocketChannel",
    "memory_pair",
    "MemoryNetwork",
    "connect_ring",
]

log = logging.getLogger("mpsi.transport")

MSG_PARAMS = 1
MSG_KEY = 2
MSG_OT = 3
MSG_DELTA = 4
MSG_GAMMA_DELTA = 5
MSG_PSI = 6
MSG_ABORT = 7

MSG_NAMES = {
    MSG_PARAMS: "PARAMS",
    MSG_KEY: "KEY",
    MSG_OT: "OT_MSG",
    MSG_DELTA: "DELTA",
    MSG_GAMMA_DELTA: "GAMMA_DELTA",
    MSG_PSI: "PSI",
    MSG_ABORT: "ABORT",
}

FRAME_HEADER_BYTES = 5
_CONT_FLAG = 0x80
CHUNK_BYTES = 64 * 1024 * 1024
MAX_PAYLOAD_BYTES = 1 << 31
_HEADER = struct.Struct("<IB")


class TransportError(Exception):
    """Base class for channel failures."""


class ChannelClosed(TransportError):
    pass


class ChannelTimeout(TransportError):
    pass


class ProtocolError(TransportError):
    """Malformed or unexpected frame."""


class ProtocolAbort(TransportError):
    """The peer sent an explicit ABORT frame."""


@dataclass
class ChannelMetrics:
    """Byte and frame counters; all monotone non-decreasing."""

    bytes_sent: int = 0
    bytes_received: int = 0
    frames_sent: int = 0
    frames_received: int = 0
    by_type_sent: dict = field(default_factory=dict)
    by_type_received: dict = field(default_factory=dict)

    def note_sent(self, msg_type: int, nbytes: int):
        self.bytes_sent += nbytes
        self.frames_sent += 1
        self.by_type_sent[msg_type] = self.by_type_sent.get(msg_type, 0) + nbytes

    def note_received(self, msg_type: int, nbytes: int):
        self.bytes_received += nbytes
        self.frames_received += 1
        self.by_type_received[msg_type] = self.by_type_received.get(msg_type, 0) + nbytes


class Channel:
    """Framing, metrics and transcript logic shared by both transports."""

    def __init__(self, name: str = "", chunk_bytes: int = CHUNK_BYTES):
        self.name = name
        self.chunk_bytes = chunk_bytes
        self.metrics = ChannelMetrics()
        self.transcript: Optional[bytearray] = None

    # transport primitives
    def _send_bytes(self, data: bytes):
        raise NotImplementedError

    def _recv_exact(self, n: int) -> bytes:
        raise NotImplementedError

    def close(self):
        raise NotImplementedError

    def enable_transcript(self):
        self.transcript = bytearray()

    def send_frame(self, msg_type: int, payload: bytes):
        """Serialize and send one message, chunking oversized payloads."""
        if msg_type not in MSG_NAMES:
            raise ProtocolError(f"unknown msg_type {msg_type}")
        view = memoryview(payload)
        chunks = [view[i : i + self.chunk_bytes] for i in range(0, len(view), self.chunk_bytes)]
        if not chunks:
            chunks = [view]
        for k, chunk in enumerate(chunks):
            if len(chunk) > MAX_PAYLOAD_BYTES:
                raise ProtocolError(f"payload chunk of {len(chunk)} bytes exceeds 2^31")
            wire_type = msg_type | (_CONT_FLAG if k + 1 < len(chunks) else 0)
            data = _HEADER.pack(len(chunk), wire_type) + bytes(chunk)
            self._send_bytes(data)
            if self.transcript is not None:
                self.transcript += data
            self.metrics.note_sent(msg_type, FRAME_HEADER_BYTES + len(chunk))

    def _recv_one(self) -> tuple[int, bool, bytes]:
        header = self._recv_exact(FRAME_HEADER_BYTES)
        length, wire_type = _HEADER.unpack(header)
        if length > MAX_PAYLOAD_BYTES:
            raise ProtocolError(f"declared frame length {length} exceeds 2^31")
        payload = self._recv_exact(length) if length else b""
        msg_type = wire_type & ~_CONT_FLAG
        if msg_type not in MSG_NAMES:
            raise ProtocolError(f"unknown msg_type {msg_type}")
        self.metrics.note_received(msg_type, FRAME_HEADER_BYTES + length)
        return msg_type, bool(wire_type & _CONT_FLAG), payload

    def recv_frame(self, expected_type: Optional[int] = None) -> tuple[int, bytes]:
        """Blocking ordered receive, reassembling chunked messages.

        With expected_type set, any other type is a protocol error --
        except ABORT, which is always accepted and raised.
        """
        msg_type, more, payload = self._recv_one()
        if more:
            parts = [payload]
            while more:
                next_type, more, part = self._recv_one()
                if next_type != msg_type:
                    raise ProtocolError("interleaved chunked messages")
                parts.append(part)
            payload = b"".join(parts)
        if msg_type == MSG_ABORT:
            raise ProtocolAbort(payload.decode("utf-8", errors="replace"))
        if expected_type is not None and msg_type != expected_type:
            raise ProtocolError(
                f"expected {MSG_NAMES[expected_type]}, got {MSG_NAMES[msg_type]}"
            )
        return msg_type, payload

    def send_abort(self, reason: str):
        """Best-effort abort notification; never raises."""
        try:
            self.send_frame(MSG_ABORT, reason.encode("utf-8"))
        except TransportError:
            pass
        except OSError:
            pass


class InMemoryChannel(Channel):
    """One endpoint of an in-process duplex byte pipe."""

    def __init__(self, name: str = "", timeout: float = 30.0, chunk_bytes: int = CHUNK_BYTES):
        super().__init__(name, chunk_bytes)
        self.timeout = timeout
        self._inbox: queue.Queue = queue.Queue()
        self._peer: Optional["InMemoryChannel"] = None
        self._closed = False
        self._buf = bytearray()

    def _send_bytes(self, data: bytes):
        if self._closed or self._peer is None:
            raise ChannelClosed(f"{self.name}: channel closed")
        self._peer._inbox.put(data)

    def _recv_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            if self._closed:
                raise ChannelClosed(f"{self.name}: channel closed")
            try:
                item = self._inbox.get(timeout=self.timeout)
            except queue.Empty:
                raise ChannelTimeout(f"{self.name}: no data within {self.timeout}s") from None
            if item is None:
                self._closed = True
                raise ChannelClosed(f"{self.name}: peer closed")
            self._buf += item
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def close(self):
        if not self._closed:
            self._closed = True
            if self._peer is not None:
                self._peer._inbox.put(None)


def memory_pair(
    name: str = "", timeout: float = 30.0, chunk_bytes: int = CHUNK_BYTES
) -> tuple[InMemoryChannel, InMemoryChannel]:
    """A connected pair of in-memory channel endpoints."""
    a = InMemoryChannel(f"{name}:a", timeout, chunk_bytes)
    b = InMemoryChannel(f"{name}:b", timeout, chunk_bytes)
    a._peer, b._peer = b, a
    return a, b


class MemoryNetwork:
    """In-memory transport registry keyed by (session id, edge).

    An edge is any hashable label (conventionally a (src, dst, tag)
    tuple); the first caller for each side gets the matching endpoint.
    """

    def __init__(self, timeout: float = 30.0):
        self.timeout = timeout
        self._pairs: dict = {}

    def endpoint(self, session: str, edge, side: int) -> InMemoryChannel:
        if side not in (0, 1):
            raise ValueError("side must be 0 or 1")
        key = (session, edge)
        if key not in self._pairs:
            self._pairs[key] = memory_pair(f"{session}:{edge}", self.timeout)
        return self._pairs[key][side]

    def close_all(self):
        for a, b in self._pairs.values():
            a.close()
            b.close()


class SocketChannel(Channel):
    """Channel over one connected TCP socket."""

    def __init__(self, sock: socket.socket, name: str = "", timeout: float = 30.0,
                 chunk_bytes: int = CHUNK_BYTES):
        super().__init__(name, chunk_bytes)
        self._sock = sock
        self._sock.settimeout(timeout)
        self._closed = False

    def _send_bytes(self, data: bytes):
        if self._closed:
            raise ChannelClosed(f"{self.name}: channel closed")
        try:
            self._sock.sendall(data)
        except socket.timeout as exc:
            raise ChannelTimeout(f"{self.name}: send timed out") from exc
        except OSError as exc:
            raise ChannelClosed(f"{self.name}: {exc}") from exc

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(min(n - len(buf), 1 << 20))
            except socket.timeout as exc:
                raise ChannelTimeout(f"{self.name}: no data") from exc
            except OSError as exc:
                raise ChannelClosed(f"{self.name}: {exc}") from exc
            if not chunk:
                raise ChannelClosed(f"{self.name}: peer closed")
            buf += chunk
        return bytes(buf)

    def close(self):
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


def _parse_endpoint(ep: str) -> tuple[str, int]:
    host, _, port = ep.rpartition(":")
    return host or "127.0.0.1", int(port)


def _dial(ep: str, window: float, timeout: float, name: str) -> SocketChannel:
    host, port = _parse_endpoint(ep)
    deadline = time.monotonic() + window
    delay = 0.05
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=min(timeout, window))
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return SocketChannel(sock, name, timeout)
        except OSError as exc:
            if time.monotonic() + delay >= deadline:
                raise ChannelTimeout(f"{name}: could not reach {ep} within {window}s") from exc
            time.sleep(delay)
            delay = min(delay * 2, 1.0)


def connect_ring(
    index: int,
    n: int,
    listen: str,
    next_ep: Optional[str] = None,
    leader_return_ep: Optional[str] = None,
    timeout: float = 30.0,
    window: float = 30.0,
):
    """Establish this party's ring channels over TCP.

    Every party accepts exactly one inbound connection on `listen` (the
    previous party for assistants; the terminal assistant's return dial
    for the leader) and dials exactly one peer (`next_ep` for parties
    1..n-1, `leader_return_ep` for party n).  Dials retry with bounded
    exponential backoff for `window` seconds.

    Returns (prev, next, leader_return); entries not applicable to the
    role are None.
    """
    host, port = _parse_endpoint(listen)
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(2)
    listener.settimeout(window)

    prev_ch = next_ch = ret_ch = None
    try:
        if index < n:
            if not next_ep:
                raise ValueError("parties 1..n-1 need the next party's endpoint")
            next_ch = _dial(next_ep, window, timeout, f"next[{index}->{index + 1}]")
        else:
            if not leader_return_ep:
                raise ValueError("the terminal party needs the leader-return endpoint")
            ret_ch = _dial(leader_return_ep, window, timeout, f"ret[{n}->1]")
        try:
            sock, addr = listener.accept()
        except socket.timeout:
            raise ChannelTimeout(f"no inbound connection on {listen} within {window}s") from None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        inbound = SocketChannel(sock, f"accept[{index}]@{addr[0]}:{addr[1]}", timeout)
        if index == 1:
            ret_ch = inbound
        else:
            prev_ch = inbound
    except BaseException:
        for ch in (prev_ch, next_ch, ret_ch):
            if ch is not None:
                ch.close()
        raise
    finally:
        listener.close()
    log.debug("party %d ring connected", index)
    return prev_ch, next_ch, ret_ch

"""Byte channels between parties: in-process loopback and localhost TCP.

A channel carries whole encoded frames as opaque byte strings; framing,
checksums and message semantics live in `wire`.  The two implementations
guarantee the same contract, which the conformance tests exercise over both:

* frames arrive intact, in order, each ``send_bytes`` matching one
  ``recv_bytes``;
* concurrent senders on one channel never interleave partial frames
  (sends are serialized per channel);
* ``recv_bytes`` honors its timeout with ``RecvTimeout``;
* a closed peer surfaces as ``ChannelClosed`` on both send and recv.

The loopback uses bounded queues (capacity 64 per direction) so a runaway
producer blocks instead of buffering without limit, mirroring TCP backpressure.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from typing import Optional

from .wire import HEADER, MAX_FRAME_BYTES, TRAILER

DEFAULT_PORT = 7401
DEFAULT_TIMEOUT = 30.0
LOOPBACK_CAPACITY = 64


class TransportError(Exception):
    pass


class ChannelClosed(TransportError):
    pass


class RecvTimeout(TransportError):
    pass


class ConnectError(TransportError):
    pass


class FrameOversize(TransportError):
    """A frame exceeding MAX_FRAME_BYTES reached the transport layer."""


class _Pipe:
    """Bounded one-direction frame buffer with TCP-like close semantics:
    a reader drains whatever was sent before the close, then sees EOF."""

    def __init__(self, capacity: int):
        self._items: list[bytes] = []
        self._capacity = capacity
        self._cond = threading.Condition()
        self._closed = False

    def put(self, item: bytes) -> None:
        with self._cond:
            while len(self._items) >= self._capacity and not self._closed:
                self._cond.wait()
            if self._closed:
                raise ChannelClosed("pipe closed")
            self._items.append(item)
            self._cond.notify_all()

    def get(self, timeout: float) -> bytes:
        deadline = time.monotonic() + timeout
        with self._cond:
            while not self._items:
                if self._closed:
                    raise ChannelClosed("peer closed the channel")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise RecvTimeout(f"no frame within {timeout}s")
                self._cond.wait(remaining)
            item = self._items.pop(0)
            self._cond.notify_all()
            return item

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class LoopbackChannel:
    """One endpoint of an in-process channel pair."""

    def __init__(self, out_pipe: _Pipe, in_pipe: _Pipe):
        self._out = out_pipe
        self._in = in_pipe
        self._closed = False

    def send_bytes(self, frame: bytes) -> None:
        if self._closed:
            raise ChannelClosed("send on closed channel")
        if len(frame) > MAX_FRAME_BYTES:
            raise FrameOversize(f"{len(frame)} bytes exceeds {MAX_FRAME_BYTES}")
        self._out.put(frame)

    def recv_bytes(self, timeout: float = DEFAULT_TIMEOUT) -> bytes:
        if self._closed:
            raise ChannelClosed("recv on closed channel")
        return self._in.get(timeout)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._out.close()
            self._in.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def loopback_pair(capacity: int = LOOPBACK_CAPACITY) -> tuple[LoopbackChannel, LoopbackChannel]:
    """A connected channel pair; what one sends the other receives."""
    a_to_b = _Pipe(capacity)
    b_to_a = _Pipe(capacity)
    return LoopbackChannel(a_to_b, b_to_a), LoopbackChannel(b_to_a, a_to_b)


class TcpChannel:
    """One endpoint of a TCP connection carrying length-delimited frames.

    Frames are written with a single ``sendall`` under a lock, so concurrent
    senders cannot interleave. The reader parses the fixed header to learn the
    payload length, then reads exactly the rest of the frame.
    """

    def __init__(self, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._send_lock = threading.Lock()
        self._closed = False

    def send_bytes(self, frame: bytes) -> None:
        if self._closed:
            raise ChannelClosed("send on closed channel")
        if len(frame) > MAX_FRAME_BYTES:
            raise FrameOversize(f"{len(frame)} bytes exceeds {MAX_FRAME_BYTES}")
        try:
            with self._send_lock:
                self._sock.sendall(frame)
        except OSError as e:
            self._closed = True
            raise ChannelClosed(f"send failed: {e}") from e

    def _recv_exact(self, n: int, deadline: float) -> bytes:
        chunks = []
        got = 0
        while got < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise RecvTimeout("timed out mid-frame" if chunks else "no frame within timeout")
            self._sock.settimeout(remaining)
            try:
                chunk = self._sock.recv(min(n - got, 1 << 20))
            except socket.timeout:
                raise RecvTimeout("no frame within timeout") from None
            except OSError as e:
                self._closed = True
                raise ChannelClosed(f"recv failed: {e}") from e
            if not chunk:
                self._closed = True
                raise ChannelClosed("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv_bytes(self, timeout: float = DEFAULT_TIMEOUT) -> bytes:
        if self._closed:
            raise ChannelClosed("recv on closed channel")
        deadline = time.monotonic() + timeout
        header = self._recv_exact(HEADER.size, deadline)
        (payload_len,) = struct.unpack_from("<I", header, 16)
        total = HEADER.size + payload_len + TRAILER.size
        if total > MAX_FRAME_BYTES:
            self.close()
            raise FrameOversize(f"peer announced a {total}-byte frame")
        rest = self._recv_exact(total - HEADER.size, deadline)
        return header + rest

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class TcpListener:
    """Bound listening socket; ``accept`` yields TcpChannels."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, backlog: int = 16):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
        except OSError as e:
            self._sock.close()
            raise ConnectError(f"cannot bind {host}:{port}: {e}") from e
        self._sock.listen(backlog)
        self.host, self.port = self._sock.getsockname()[:2]

    def accept(self, timeout: float = DEFAULT_TIMEOUT) -> TcpChannel:
        self._sock.settimeout(timeout)
        try:
            conn, _ = self._sock.accept()
        except socket.timeout:
            raise RecvTimeout(f"no connection within {timeout}s") from None
        except OSError as e:
            raise ConnectError(f"accept failed: {e}") from e
        return TcpChannel(conn)

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect_tcp(
    host: str,
    port: int,
    timeout: float = DEFAULT_TIMEOUT,
    retry_for: Optional[float] = None,
) -> TcpChannel:
    """Connect to a listener.

    With ``retry_for`` set, connection refusals are retried until that many
    seconds have passed — parties of a run may start in any order.
    """
    deadline = time.monotonic() + (retry_for or 0.0)
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            return TcpChannel(sock)
        except OSError as e:
            if retry_for is not None and time.monotonic() < deadline:
                time.sleep(0.05)
                continue
            raise ConnectError(f"cannot connect to {host}:{port}: {e}") from e

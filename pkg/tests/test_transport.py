"""Channel conformance: every transport must behave identically.

The same suite runs against loopback pairs and real localhost TCP; the
training layer treats them interchangeably, so they must pass identical
assertions.
"""

import threading
import time

import numpy as np
import pytest

from splitlimb import wire
from splitlimb.transport import (
    ChannelClosed,
    ConnectError,
    FrameOversize,
    RecvTimeout,
    TcpListener,
    connect_tcp,
    loopback_pair,
)


@pytest.fixture(params=["loopback", "tcp"])
def channel_pair(request):
    if request.param == "loopback":
        a, b = loopback_pair()
        yield a, b
        a.close()
        b.close()
    else:
        listener = TcpListener("127.0.0.1", 0)
        result = {}

        def _connect():
            result["client"] = connect_tcp(listener.host, listener.port, retry_for=5.0)

        t = threading.Thread(target=_connect)
        t.start()
        server_side = listener.accept(5.0)
        t.join()
        listener.close()
        a, b = server_side, result["client"]
        yield a, b
        a.close()
        b.close()


def frame_of(i, rows=2, cols=2):
    data = np.full((rows, cols), float(i), dtype=np.float32)
    return wire.encode_frame(1, wire.Smashed(0, 0, i, 0, data))


def test_send_recv_order(channel_pair):
    a, b = channel_pair
    frames = [frame_of(i, rows=1 + i % 5, cols=1 + i % 3) for i in range(50)]
    for f in frames:
        a.send_bytes(f)
    got = [b.recv_bytes(5.0) for _ in range(50)]
    assert got == frames


def test_bidirectional(channel_pair):
    a, b = channel_pair
    a.send_bytes(frame_of(1))
    b.send_bytes(frame_of(2))
    assert b.recv_bytes(5.0) == frame_of(1)
    assert a.recv_bytes(5.0) == frame_of(2)


def test_large_frame(channel_pair):
    a, b = channel_pair
    big = wire.encode_frame(
        1, wire.Smashed(0, 0, 0, 0, np.ones((1500, 800), dtype=np.float32))
    )
    assert len(big) > 4_000_000
    t = threading.Thread(target=a.send_bytes, args=(big,))
    t.start()
    got = b.recv_bytes(30.0)
    t.join()
    assert got == big


def test_recv_timeout(channel_pair):
    a, b = channel_pair
    t0 = time.monotonic()
    with pytest.raises(RecvTimeout):
        b.recv_bytes(0.2)
    assert time.monotonic() - t0 < 2.0


def test_close_drains_then_raises(channel_pair):
    a, b = channel_pair
    a.send_bytes(frame_of(0))
    a.send_bytes(frame_of(1))
    a.close()
    assert b.recv_bytes(5.0) == frame_of(0)
    assert b.recv_bytes(5.0) == frame_of(1)
    with pytest.raises(ChannelClosed):
        b.recv_bytes(5.0)


def test_send_after_close_raises(channel_pair):
    a, _ = channel_pair
    a.close()
    with pytest.raises(ChannelClosed):
        a.send_bytes(frame_of(0))


def test_concurrent_senders_do_not_interleave(channel_pair):
    """Frames sent from several threads must arrive whole, in some order."""
    a, b = channel_pair
    per_thread = 50
    n_threads = 4

    def sender(tid):
        for i in range(per_thread):
            a.send_bytes(frame_of(tid * 1000 + i, rows=1 + (i % 7), cols=3))

    threads = [threading.Thread(target=sender, args=(t,)) for t in range(n_threads)]
    for t in threads:
        t.start()
    seen = []
    for _ in range(per_thread * n_threads):
        data = b.recv_bytes(10.0)
        msg, end = wire.decode(data)  # raises if a frame was torn
        assert end == len(data)
        seen.append(msg.batch_index)
    for t in threads:
        t.join()
    assert sorted(seen) == sorted(
        tid * 1000 + i for tid in range(n_threads) for i in range(per_thread)
    )


def test_connect_refused_quickly():
    listener = TcpListener("127.0.0.1", 0)
    port = listener.port
    listener.close()
    t0 = time.monotonic()
    with pytest.raises(ConnectError):
        connect_tcp("127.0.0.1", port, retry_for=0.5)
    assert time.monotonic() - t0 < 5.0


def test_tcp_rejects_oversize_frame_header():
    listener = TcpListener("127.0.0.1", 0)
    result = {}

    def _connect():
        result["client"] = connect_tcp(listener.host, listener.port, retry_for=5.0)

    t = threading.Thread(target=_connect)
    t.start()
    server_side = listener.accept(5.0)
    t.join()
    listener.close()
    client = result["client"]
    # hand-craft a header declaring a payload over the cap
    evil = wire.HEADER.pack(wire.MAGIC, wire.VERSION, 3, 0, wire.MAX_FRAME_BYTES)
    client._sock.sendall(evil)
    with pytest.raises(FrameOversize):
        server_side.recv_bytes(5.0)
    client.close()
    server_side.close()


def test_loopback_capacity_blocks_until_drained():
    a, b = loopback_pair(capacity=2)
    a.send_bytes(frame_of(0))
    a.send_bytes(frame_of(1))
    done = threading.Event()

    def sender():
        a.send_bytes(frame_of(2))  # must block until a slot frees
        done.set()

    t = threading.Thread(target=sender)
    t.start()
    time.sleep(0.05)
    assert not done.is_set()
    assert b.recv_bytes(1.0) == frame_of(0)
    t.join(timeout=5.0)
    assert done.is_set()
    a.close()
    b.close()


def test_close_unblocks_pending_reader():
    a, b = loopback_pair()
    errors = []

    def reader():
        try:
            b.recv_bytes(10.0)
        except ChannelClosed:
            errors.append("closed")

    t = threading.Thread(target=reader)
    t.start()
    time.sleep(0.05)
    b.close()
    t.join(timeout=5.0)
    assert errors == ["closed"]
    a.close()

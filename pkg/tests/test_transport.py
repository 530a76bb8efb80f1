import socket
import struct
import threading
import time

import numpy as np
import pytest

from segfuse import container, transport
from segfuse.geometry import Intrinsics
from segfuse.segmentation import ObjectCrop
from segfuse.transport import (
    KIND_ACK,
    KIND_DATA,
    CategoryDemux,
    FifoBuffer,
    PacketClient,
    PacketReceiver,
    TransportError,
    drain,
    iter_queue,
    read_frame,
    write_frame,
)

INTR = Intrinsics(fx=50.0, fy=50.0, cx=15.5, cy=11.5, width=32, height=24)


def tiny_packet(ts, labels=("chair",), rng=None):
    rng = rng or np.random.default_rng(ts)
    crops = []
    for label in labels:
        crops.append(ObjectCrop(
            label=label,
            confidence=0.9,
            rgb=rng.integers(0, 256, size=(4, 5, 3), dtype=np.uint8).astype(np.uint8),
            depth=rng.integers(1, 5000, size=(4, 5)).astype(np.uint16),
            bbox_origin=(1, 2),
            frame_timestamp=ts,
            intrinsics=INTR,
        ))
    return container.pack(crops, frame_timestamp=ts, intrinsics=INTR, compression_level=1)


class TestLoopbackDelivery:
    def test_packets_arrive_exactly_once_in_order(self):
        n = 50
        received = []
        with PacketReceiver(port=0, buffer_capacity=8) as server:
            server.serve_in_background()
            consumer = threading.Thread(
                target=lambda: received.extend(
                    p.header.frame_timestamp for p in drain(server.buffer, timeout=10)
                ),
                daemon=True,
            )
            consumer.start()
            with PacketClient("127.0.0.1", server.port) as client:
                for ts in range(n):
                    receipt = client.send(tiny_packet(ts))
                    assert receipt.sequence == ts
                client.send_end()
            consumer.join(timeout=10)
        assert received == list(range(n))

    def test_end_of_stream_closes_cleanly(self):
        with PacketReceiver(port=0) as server:
            thread = server.serve_in_background()
            with PacketClient("127.0.0.1", server.port) as client:
                client.send(tiny_packet(0))
                client.send_end()
            assert list(drain(server.buffer, timeout=5))
            thread.join(timeout=5)
            assert not thread.is_alive()


class TestAckGating:
    def test_delayed_acks_bound_send_rate(self):
        """A server acking after 100 ms caps the client at 10 packets/s."""
        delay = 0.1
        n = 8
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]

        def slow_acker():
            conn, _ = listener.accept()
            with conn:
                for _ in range(n):
                    kind, seq, _ = read_frame(conn)
                    assert kind == KIND_DATA
                    time.sleep(delay)
                    write_frame(conn, KIND_ACK, seq)

        thread = threading.Thread(target=slow_acker, daemon=True)
        thread.start()
        payload = tiny_packet(0)
        start = time.monotonic()
        with PacketClient("127.0.0.1", port) as client:
            for _ in range(n):
                client.send(payload)
        elapsed = time.monotonic() - start
        thread.join(timeout=5)
        listener.close()
        rate = n / elapsed
        assert elapsed >= n * delay
        assert rate <= 1.0 / delay + 0.5

    def test_at_most_one_frame_in_flight(self):
        """The client never writes frame k+1 before the ack for k."""
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]
        violations = []

        def checking_acker():
            conn, _ = listener.accept()
            with conn:
                for expected in range(5):
                    kind, seq, payload = read_frame(conn)
                    # nothing else may be queued before we ack
                    conn.setblocking(False)
                    try:
                        extra = conn.recv(1, socket.MSG_PEEK)
                        if extra:
                            violations.append(seq)
                    except BlockingIOError:
                        pass
                    finally:
                        conn.setblocking(True)
                    time.sleep(0.02)
                    write_frame(conn, KIND_ACK, seq)

        thread = threading.Thread(target=checking_acker, daemon=True)
        thread.start()
        with PacketClient("127.0.0.1", port) as client:
            for _ in range(5):
                client.send(tiny_packet(0))
        thread.join(timeout=5)
        listener.close()
        assert violations == []


class TestBackpressure:
    def test_full_buffer_withholds_acks(self):
        """With capacity 1 and a slow consumer, ack latency tracks the consumer."""
        consumer_delay = 0.08
        n = 8
        with PacketReceiver(port=0, buffer_capacity=1) as server:
            server.serve_in_background()

            def slow_consumer():
                while True:
                    item = server.buffer.get(timeout=10)
                    if item is None:
                        return
                    time.sleep(consumer_delay)

            consumer = threading.Thread(target=slow_consumer, daemon=True)
            consumer.start()
            latencies = []
            with PacketClient("127.0.0.1", server.port) as client:
                start = time.monotonic()
                for ts in range(n):
                    latencies.append(client.send(tiny_packet(ts)).round_trip_s)
                elapsed = time.monotonic() - start
                client.send_end()
            consumer.join(timeout=10)
        # first two sends pipeline into the buffer + the consumer's hands;
        # after that every ack waits one full consumer cycle
        assert elapsed >= (n - 2) * consumer_delay
        steady = sorted(latencies[2:])[len(latencies[2:]) // 2]
        assert 0.6 * consumer_delay <= steady <= 2.0 * consumer_delay

    def test_fifo_counters_and_order(self):
        buf = FifoBuffer(capacity=4)
        for i in range(4):
            buf.put(i)
        assert len(buf) == 4 and buf.enqueued == 4
        assert [buf.get() for _ in range(4)] == [0, 1, 2, 3]
        assert buf.dequeued == 4
        with pytest.raises(ValueError):
            FifoBuffer(capacity=0)


class TestRobustness:
    def test_fuzzed_bytes_get_error_frame_not_crash(self):
        with PacketReceiver(port=0) as server:
            server.serve_in_background()
            rng = np.random.default_rng(0)
            # valid framing but garbage payload: server must reply with an error
            with socket.create_connection(("127.0.0.1", server.port)) as sock:
                garbage = rng.integers(0, 256, size=64, dtype=np.uint16).astype(np.uint8).tobytes()
                write_frame(sock, KIND_DATA, 0, garbage)
                kind, _, payload = read_frame(sock)
                assert kind == transport.KIND_ERROR
                assert b"undecodable" in payload
            # invalid frame kind: connection dropped, listener survives
            with socket.create_connection(("127.0.0.1", server.port)) as sock:
                sock.sendall(struct.pack("<QIB", 0, 10, 99) + b"x" * 10)
                sock.settimeout(2)
                try:
                    sock.recv(64)
                except (ConnectionError, socket.timeout):
                    pass
            # a well-behaved client still gets through afterwards
            with PacketClient("127.0.0.1", server.port) as client:
                client.send(tiny_packet(5))
                client.send_end()
            assert [p.header.frame_timestamp for p in drain(server.buffer, timeout=5)] == [5]

    def test_client_killed_mid_frame_leaves_server_usable(self):
        with PacketReceiver(port=0) as server:
            server.serve_in_background()
            sock = socket.create_connection(("127.0.0.1", server.port))
            sock.sendall(b"\x01\x02\x03")  # partial header, then vanish
            sock.close()
            time.sleep(0.1)
            with PacketClient("127.0.0.1", server.port) as client:
                client.send(tiny_packet(1))
                client.send_end()
            assert [p.header.frame_timestamp for p in drain(server.buffer, timeout=5)] == [1]

    def test_wrong_sequence_rejected(self):
        with PacketReceiver(port=0) as server:
            server.serve_in_background()
            with socket.create_connection(("127.0.0.1", server.port)) as sock:
                write_frame(sock, KIND_DATA, 3, tiny_packet(0))  # expected seq 0
                kind, _, _ = read_frame(sock)
                assert kind == transport.KIND_ERROR

    def test_connect_failure_is_retriable(self):
        with pytest.raises(TransportError) as err:
            PacketClient("127.0.0.1", 1, connect_timeout=0.5)
        assert err.value.retriable

    def test_ack_timeout(self):
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        client = PacketClient("127.0.0.1", listener.getsockname()[1], ack_timeout=0.3)
        with pytest.raises(transport.AckTimeoutError):
            client.send(tiny_packet(0))
        client.close()
        listener.close()


class TestDemux:
    def _run_stream(self, packets, capacity=8):
        buf = FifoBuffer(capacity=capacity)
        seen = {}
        demux = CategoryDemux(buf, on_new_category=lambda label, q: seen.setdefault(label, q))
        demux.run_in_background()
        for p in packets:
            buf.put(container.unpack(p))
        buf.put(None)
        demux.join(timeout=5)
        return demux, seen

    def test_two_categories_routed_with_timestamps(self):
        packets = [tiny_packet(ts, labels=("chair", "table")) for ts in range(4)]
        demux, seen = self._run_stream(packets)
        assert set(seen) == {"chair", "table"}
        for label in ("chair", "table"):
            crops = list(iter_queue(demux.queues[label]))
            assert [c.frame_timestamp for c in crops] == [0, 1, 2, 3]
            assert all(c.label == label for c in crops)

    def test_absent_category_queue_unchanged(self):
        packets = [tiny_packet(0, labels=("chair", "table")), tiny_packet(1, labels=("chair",))]
        demux, _ = self._run_stream(packets)
        assert [c.frame_timestamp for c in iter_queue(demux.queues["table"])] == [0]
        assert [c.frame_timestamp for c in iter_queue(demux.queues["chair"])] == [0, 1]

    def test_per_category_fifo_order(self):
        packets = [tiny_packet(ts, labels=("chair",)) for ts in range(10)]
        demux, _ = self._run_stream(packets, capacity=2)
        stamps = [c.frame_timestamp for c in iter_queue(demux.queues["chair"])]
        assert stamps == sorted(stamps)

"""Framed, ack-gated packet streaming over TCP.

The capture side is deliberately coupled to delivery: the client sends one
data frame and refuses to produce the next until the server acknowledges
it. The server acknowledges a packet only after it has been decoded and
enqueued into a bounded FIFO buffer, so a full buffer (slow consumer)
withholds acks and throttles the camera end to end.

Frame layout on the wire (little-endian): sequence u64, payload length
u32, kind u8, then the payload. Kinds: data, ack, end-of-stream, error.
Sequence numbers start at 0 and increase by 1 per frame sent; the receiver
rejects gaps and duplicates, so delivery over a healthy connection is
exactly-once and in order.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Optional

from . import container
from .segmentation import ObjectCrop

log = logging.getLogger(__name__)

DEFAULT_PORT = 7455
DEFAULT_ACK_TIMEOUT = 10.0
MAX_PAYLOAD = 256 * 1024 * 1024

KIND_DATA = 0
KIND_ACK = 1
KIND_END = 2
KIND_ERROR = 3

_HEADER = struct.Struct("<QIB")


class TransportError(Exception):
    """Connection-level failure; ``retriable`` hints the capture loop."""

    def __init__(self, message: str, retriable: bool = False):
        super().__init__(message)
        self.retriable = retriable


class AckTimeoutError(TransportError):
    def __init__(self, message: str):
        super().__init__(message, retriable=False)


class ProtocolError(TransportError):
    """Peer sent something that is not a valid frame."""


class ConnectionClosed(TransportError):
    def __init__(self, message: str = "connection closed by peer"):
        super().__init__(message, retriable=True)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            raise
        except OSError as exc:
            raise ConnectionClosed(f"receive failed: {exc}") from exc
        if not chunk:
            raise ConnectionClosed()
        buf.extend(chunk)
    return bytes(buf)


def write_frame(sock: socket.socket, kind: int, seq: int, payload: bytes = b"") -> None:
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("payload exceeds maximum frame size")
    try:
        sock.sendall(_HEADER.pack(seq, len(payload), kind) + payload)
    except OSError as exc:
        raise ConnectionClosed(f"send failed: {exc}") from exc


def read_frame(sock: socket.socket):
    """Read one frame; returns (kind, seq, payload)."""
    header = _recv_exact(sock, _HEADER.size)
    seq, length, kind = _HEADER.unpack(header)
    if kind not in (KIND_DATA, KIND_ACK, KIND_END, KIND_ERROR):
        raise ProtocolError(f"unknown frame kind {kind}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame payload length {length} exceeds limit")
    payload = _recv_exact(sock, length) if length else b""
    return kind, seq, payload


@dataclass(frozen=True)
class AckReceipt:
    sequence: int
    round_trip_s: float


class PacketClient:
    """Sends packets one at a time, gated on the server's acknowledgment."""

    def __init__(self, host: str, port: int = DEFAULT_PORT,
                 ack_timeout: float = DEFAULT_ACK_TIMEOUT,
                 connect_timeout: float = 10.0):
        self.ack_timeout = ack_timeout
        try:
            self.sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise TransportError(f"connect to {host}:{port} failed: {exc}", retriable=True) from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.next_seq = 0

    def _await_ack(self, seq: int) -> AckReceipt:
        start = time.monotonic()
        self.sock.settimeout(self.ack_timeout)
        try:
            kind, ack_seq, payload = read_frame(self.sock)
        except socket.timeout as exc:
            raise AckTimeoutError(f"no ack for frame {seq} within {self.ack_timeout}s") from exc
        if kind == KIND_ERROR:
            raise TransportError(f"server rejected stream: {payload.decode('utf-8', 'replace')}")
        if kind != KIND_ACK or ack_seq != seq:
            raise ProtocolError(f"expected ack for {seq}, got kind={kind} seq={ack_seq}")
        return AckReceipt(sequence=seq, round_trip_s=time.monotonic() - start)

    def send(self, packet_bytes: bytes) -> AckReceipt:
        """Write one data frame and block until it is acknowledged."""
        seq = self.next_seq
        write_frame(self.sock, KIND_DATA, seq, packet_bytes)
        receipt = self._await_ack(seq)
        self.next_seq += 1
        return receipt

    def send_end(self) -> AckReceipt:
        seq = self.next_seq
        write_frame(self.sock, KIND_END, seq)
        receipt = self._await_ack(seq)
        self.next_seq += 1
        return receipt

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class FifoBuffer:
    """Bounded FIFO of decoded packets; ``None`` marks end of stream."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._q: "queue.Queue" = queue.Queue(maxsize=capacity)
        self.enqueued = 0
        self.dequeued = 0
        self._lock = threading.Lock()

    def put(self, item, timeout: Optional[float] = None) -> None:
        self._q.put(item, timeout=timeout)
        with self._lock:
            self.enqueued += 1

    def get(self, timeout: Optional[float] = None):
        item = self._q.get(timeout=timeout)
        with self._lock:
            self.dequeued += 1
        return item

    def __len__(self):
        return self._q.qsize()


def drain(buffer: FifoBuffer, timeout: Optional[float] = None) -> Iterator[container.SegmentPacket]:
    """Yield packets until the end-of-stream sentinel."""
    while True:
        item = buffer.get(timeout=timeout)
        if item is None:
            return
        yield item


class PacketReceiver:
    """Accepts client connections and feeds decoded packets into a buffer.

    Serves one connection at a time (multi-client merging is out of scope);
    a dying client never poisons the listener, which keeps accepting.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 buffer_capacity: int = 8):
        self.buffer = FifoBuffer(buffer_capacity)
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(1)
        self.address = self._listener.getsockname()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    @property
    def port(self) -> int:
        return self.address[1]

    def _serve_connection(self, conn: socket.socket) -> bool:
        """Process one client; returns True when an end frame arrived."""
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        expected_seq = 0
        while not self._stop.is_set():
            try:
                kind, seq, payload = read_frame(conn)
            except ConnectionClosed:
                log.warning("client disconnected mid-stream")
                return False
            except ProtocolError as exc:
                log.error("protocol error: %s", exc)
                self._send_error(conn, str(exc))
                return False
            if kind == KIND_END:
                self.buffer.put(None)
                write_frame(conn, KIND_ACK, seq)
                return True
            if kind != KIND_DATA or seq != expected_seq:
                self._send_error(conn, f"expected data frame {expected_seq}")
                return False
            try:
                packet = container.unpack(payload)
            except container.PacketError as exc:
                log.error("undecodable packet %d: %s", seq, exc)
                self._send_error(conn, f"packet {seq} undecodable: {exc}")
                return False
            self.buffer.put(packet)  # blocks while full: backpressure
            try:
                write_frame(conn, KIND_ACK, seq)
            except ConnectionClosed:
                log.warning("client vanished before ack %d", seq)
                return False
            expected_seq += 1
        return False

    @staticmethod
    def _send_error(conn: socket.socket, message: str) -> None:
        try:
            write_frame(conn, KIND_ERROR, 0, message.encode("utf-8"))
        except TransportError:
            pass

    def serve(self) -> None:
        """Accept connections until an end-of-stream frame or stop()."""
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            with conn:
                if self._serve_connection(conn):
                    return

    def serve_in_background(self) -> threading.Thread:
        self._thread = threading.Thread(target=self.serve, name="packet-receiver", daemon=True)
        self._thread.start()
        return self._thread

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


class CategoryDemux:
    """Routes crops from a packet buffer into one ordered queue per label.

    Queues preserve frame order within a category. A freshly seen category
    triggers ``on_new_category`` (used to spawn fusion workers). The
    end-of-stream sentinel is replicated into every category queue.
    """

    def __init__(self, buffer: FifoBuffer, queue_capacity: int = 64,
                 on_new_category: Optional[Callable[[str, "queue.Queue"], None]] = None,
                 on_packet: Optional[Callable[[container.SegmentPacket], None]] = None):
        self.buffer = buffer
        self.queue_capacity = queue_capacity
        self.on_new_category = on_new_category
        self.on_packet = on_packet
        self.queues: Dict[str, "queue.Queue"] = {}
        self._thread: Optional[threading.Thread] = None

    def _queue_for(self, label: str) -> "queue.Queue":
        q = self.queues.get(label)
        if q is None:
            q = queue.Queue(maxsize=self.queue_capacity)
            self.queues[label] = q
            if self.on_new_category is not None:
                self.on_new_category(label, q)
        return q

    def run(self) -> None:
        for packet in drain(self.buffer):
            if self.on_packet is not None:
                self.on_packet(packet)
            for label, crops in packet.groups.items():
                q = self._queue_for(label)
                for crop in crops:
                    q.put(crop)
        for q in self.queues.values():
            q.put(None)

    def run_in_background(self) -> threading.Thread:
        self._thread = threading.Thread(target=self.run, name="demux", daemon=True)
        self._thread.start()
        return self._thread

    def join(self, timeout: Optional[float] = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout=timeout)


def iter_queue(q: "queue.Queue") -> Iterator[ObjectCrop]:
    """Yield crops from a demux queue until its end sentinel."""
    while True:
        crop = q.get()
        if crop is None:
            return
        yield crop

"""Two-party transports with byte-accurate accounting.

Every message is one frame: u32 little-endian payload length, u8 protocol
tag, payload.  The in-process queue transport and the TCP transport carry
identical frames, so wire counts agree bit for bit between the two.  Ring
elements are bit-packed on the wire (l bits per element) so traffic scales
with the bit width the way the protocols say it should.
"""

from __future__ import annotations

import queue
import socket
import struct

import numpy as np

from .errors import InvariantViolation
from .qtensor import ring_mask, ring_reduce

_HEADER = struct.Struct("<IB")

# frame tags
TAG_OPEN = 1          # masked-share opening exchange
TAG_GEMM_MASK = 2     # client's masked GEMM operand
TAG_INPUT_SHARE = 3   # client distributing the server's input share
TAG_OUTPUT_SHARE = 4  # server revealing its output share
TAG_LEDGER_SYNC = 5   # end-of-run ledger agreement check


def pack_ring(values: np.ndarray, bits: int) -> bytes:
    """Bit-pack ring elements, `bits` bits each, little-endian within values."""
    v = np.ascontiguousarray(values, dtype=np.int64).ravel()
    u = v.astype(np.uint64) & ring_mask(bits)
    shifts = np.arange(bits, dtype=np.uint64)
    bitmat = ((u[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bitmat.ravel(), bitorder="little").tobytes()


def unpack_ring(payload: bytes, n: int, bits: int) -> np.ndarray:
    """Inverse of pack_ring; returns signed representatives."""
    total = n * bits
    bitvec = np.unpackbits(np.frombuffer(payload, dtype=np.uint8),
                           count=total, bitorder="little")
    bitmat = bitvec.reshape(n, bits).astype(np.uint64)
    shifts = np.arange(bits, dtype=np.uint64)
    u = (bitmat << shifts).sum(axis=1, dtype=np.uint64)
    return ring_reduce(u, bits)


class Endpoint:
    """One side of a duplex channel.  Subclasses provide raw send/recv."""

    def __init__(self):
        self.bytes_sent = 0
        self.bytes_received = 0

    def _send_raw(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_raw(self) -> bytes:
        raise NotImplementedError

    def send(self, tag: int, payload: bytes) -> None:
        frame = _HEADER.pack(len(payload), tag) + payload
        self.bytes_sent += len(frame)
        self._send_raw(frame)

    def recv(self, tag: int) -> bytes:
        frame = self._recv_raw()
        self.bytes_received += len(frame)
        length, got = _HEADER.unpack_from(frame)
        if got != tag:
            raise InvariantViolation(f"expected frame tag {tag}, got {got}")
        payload = frame[_HEADER.size:]
        if len(payload) != length:
            raise InvariantViolation("frame length mismatch")
        return payload

    def traffic(self) -> int:
        return self.bytes_sent + self.bytes_received

    def close(self) -> None:
        pass


class QueueEndpoint(Endpoint):
    def __init__(self, outbox: queue.Queue, inbox: queue.Queue):
        super().__init__()
        self._outbox = outbox
        self._inbox = inbox

    def _send_raw(self, data: bytes) -> None:
        self._outbox.put(data)

    def _recv_raw(self) -> bytes:
        return self._inbox.get(timeout=60.0)


def inproc_channel_pair() -> tuple[QueueEndpoint, QueueEndpoint]:
    """Paired in-process endpoints (server side, client side)."""
    a: queue.Queue = queue.Queue()
    b: queue.Queue = queue.Queue()
    return QueueEndpoint(a, b), QueueEndpoint(b, a)


class SocketEndpoint(Endpoint):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self._sock = sock

    def _send_raw(self, data: bytes) -> None:
        self._sock.sendall(data)

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._sock.recv(remaining)
            if not chunk:
                raise InvariantViolation("peer closed the connection mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def _recv_raw(self) -> bytes:
        header = self._recv_exact(_HEADER.size)
        length, _tag = _HEADER.unpack_from(header)
        return header + self._recv_exact(length)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def tcp_listen(host: str, port: int) -> tuple[SocketEndpoint, int]:
    """Server side: accept one peer; returns endpoint and the bound port."""
    ls = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    ls.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    ls.bind((host, port))
    ls.listen(1)
    bound = ls.getsockname()[1]
    conn, _ = ls.accept()
    ls.close()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketEndpoint(conn), bound


def tcp_connect(host: str, port: int, retries: int = 50) -> SocketEndpoint:
    import time

    last = None
    for _ in range(retries):
        try:
            sock = socket.create_connection((host, port), timeout=10.0)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return SocketEndpoint(sock)
        except OSError as exc:
            last = exc
            time.sleep(0.05)
    raise InvariantViolation(f"cannot reach peer {host}:{port}: {last}")

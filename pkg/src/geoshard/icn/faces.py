"""Faces: channels attaching nodes to each other.

Two transports: in-process pairs (synchronous by default, optionally queued
for hand-pumped deterministic tests) and TCP with u32 big-endian length
framing for multi-process runs. A face delivers packets to whoever set its
``on_receive`` callback (a forwarder, consumer or producer).
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from collections import deque
from typing import Callable, Optional

from geoshard.icn.packets import DataPacket, Packet, decode_packet, encode_packet

log = logging.getLogger(__name__)


class TokenBucket:
    """Serializes transmissions at a fixed bit rate (virtual-time bucket)."""

    def __init__(self, rate_bps: float):
        if rate_bps <= 0:
            raise ValueError("rate must be positive")
        self.rate_bps = rate_bps
        self._lock = threading.Lock()
        self._vtime = 0.0

    def acquire(self, nbits: int) -> None:
        with self._lock:
            now = time.monotonic()
            start = max(now, self._vtime)
            self._vtime = start + nbits / self.rate_bps
            wait = self._vtime - now
        if wait > 0:
            time.sleep(wait)


class Face:
    """One endpoint of a bidirectional link."""

    def __init__(self, label: str = ""):
        self.label = label
        self.on_receive: Optional[Callable[[Packet], None]] = None
        self.peer: Optional["Face"] = None
        self.loss: Optional[Callable[[Packet], bool]] = None
        self.limiter: Optional[TokenBucket] = None
        self.queued = False
        self._queue: deque[Packet] = deque()
        self.sent = 0
        self.received = 0

    def send(self, pkt: Packet) -> None:
        self.sent += 1
        if self.peer is not None:
            self.peer._deliver(pkt)

    def _deliver(self, pkt: Packet) -> None:
        if self.loss is not None and self.loss(pkt):
            return
        if self.limiter is not None and isinstance(pkt, DataPacket):
            self.limiter.acquire(8 * len(pkt.payload))
        self.received += 1
        if self.queued:
            self._queue.append(pkt)
        elif self.on_receive is not None:
            self.on_receive(pkt)

    def pump(self, limit: int | None = None) -> int:
        """Dispatch queued packets; returns how many were delivered."""
        n = 0
        while self._queue and (limit is None or n < limit):
            pkt = self._queue.popleft()
            if self.on_receive is not None:
                self.on_receive(pkt)
            n += 1
        return n

    def close(self) -> None:
        self.peer = None

    def __repr__(self):
        return f"Face({self.label!r})"


def face_pair(
    label: str = "",
    queued_a: bool = False,
    queued_b: bool = False,
    loss_to_a: Callable[[Packet], bool] | None = None,
    loss_to_b: Callable[[Packet], bool] | None = None,
    limit_to_a: TokenBucket | None = None,
    limit_to_b: TokenBucket | None = None,
) -> tuple[Face, Face]:
    """A connected in-process face pair (a <-> b)."""
    a, b = Face(label + ":a"), Face(label + ":b")
    a.peer, b.peer = b, a
    a.queued, b.queued = queued_a, queued_b
    a.loss, b.loss = loss_to_a, loss_to_b
    a.limiter, b.limiter = limit_to_a, limit_to_b
    return a, b


# --- TCP transport ----------------------------------------------------------

_HDR = struct.Struct("!I")
MAX_FRAME = 32 * 1024 * 1024


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


class TcpFace(Face):
    """Face carried over a TCP socket; a reader thread feeds on_receive."""

    def __init__(self, sock: socket.socket, label: str = "tcp"):
        super().__init__(label)
        self._sock = sock
        self._send_lock = threading.Lock()
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def send(self, pkt: Packet) -> None:
        raw = encode_packet(pkt)
        try:
            with self._send_lock:
                self._sock.sendall(_HDR.pack(len(raw)) + raw)
            self.sent += 1
        except OSError:
            self.close()

    def _read_loop(self) -> None:
        while not self._closed:
            try:
                hdr = _read_exact(self._sock, _HDR.size)
                if hdr is None:
                    break
                (length,) = _HDR.unpack(hdr)
                if length > MAX_FRAME:
                    log.warning("%s: oversized frame (%d bytes), closing", self.label, length)
                    break
                raw = _read_exact(self._sock, length)
                if raw is None:
                    break
            except OSError:
                break
            try:
                pkt = decode_packet(raw)
            except ValueError as exc:
                log.warning("%s: dropping undecodable frame: %s", self.label, exc)
                continue
            self.received += 1
            if self.on_receive is not None:
                self.on_receive(pkt)
        self.close()

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


class TcpFaceServer:
    """Accepts TCP connections and hands each one to `on_face` as a TcpFace."""

    def __init__(self, host: str, port: int, on_face: Callable[[TcpFace], None]):
        self._srv = socket.create_server((host, port))
        self.address = self._srv.getsockname()[:2]
        self._on_face = on_face
        self._closed = False
        self._faces: list[TcpFace] = []
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                sock, addr = self._srv.accept()
            except OSError:
                break
            face = TcpFace(sock, label=f"tcp<{addr[0]}:{addr[1]}")
            self._faces.append(face)
            self._on_face(face)

    def close(self) -> None:
        self._closed = True
        try:
            self._srv.close()
        except OSError:
            pass
        for face in self._faces:
            face.close()


def tcp_connect(host: str, port: int, label: str = "tcp") -> TcpFace:
    return TcpFace(socket.create_connection((host, port), timeout=10), label=label)

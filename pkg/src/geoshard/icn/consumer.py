"""Consumer side: express Interests, fetch and reassemble segmented content."""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

from geoshard.icn.faces import Face
from geoshard.icn.names import Name
from geoshard.icn.packets import (
    DEFAULT_LIFETIME_MS,
    DataPacket,
    InterestPacket,
    Packet,
    reassemble,
    segment_name,
)

DEFAULT_RETRIES = 3
DEFAULT_WINDOW = 8

InterestSigner = Callable[[InterestPacket], InterestPacket]
DataValidator = Callable[[DataPacket], None]


class GetTimeoutError(TimeoutError):
    def __init__(self, name: Name, attempts: int):
        super().__init__(f"no data for {name} after {attempts} attempts")
        self.name = name


class _Waiter:
    __slots__ = ("event", "packet")

    def __init__(self):
        self.event = threading.Event()
        self.packet: DataPacket | None = None


class Consumer:
    """Blocking fetch API over a single face.

    Retransmission is consumer-side: a fixed interval equal to the Interest
    lifetime, `retries` additional attempts with fresh nonces.
    """

    def __init__(self, face: Face, label: str = "consumer"):
        self.face = face
        self.label = label
        self._lock = threading.Lock()
        self._pending: dict[Name, list[_Waiter]] = {}
        face.on_receive = self._on_packet

    def _on_packet(self, pkt: Packet) -> None:
        if not isinstance(pkt, DataPacket):
            return
        with self._lock:
            waiters = self._pending.pop(pkt.name, [])
        for w in waiters:
            w.packet = pkt
            w.event.set()

    def express_interest(
        self,
        interest: InterestPacket,
        retries: int = DEFAULT_RETRIES,
        validate: DataValidator | None = None,
    ) -> DataPacket:
        attempts = retries + 1
        for attempt in range(attempts):
            pkt = interest if attempt == 0 else interest.with_new_nonce()
            waiter = _Waiter()
            with self._lock:
                self._pending.setdefault(pkt.name, []).append(waiter)
            self.face.send(pkt)
            if waiter.event.wait(pkt.lifetime_ms / 1000.0):
                if validate is not None:
                    validate(waiter.packet)  # raises on failure
                return waiter.packet
            with self._lock:
                waiters = self._pending.get(pkt.name)
                if waiters and waiter in waiters:
                    waiters.remove(waiter)
                    if not waiters:
                        del self._pending[pkt.name]
        raise GetTimeoutError(interest.name, attempts)

    def get(
        self,
        name: Name,
        *,
        lifetime_ms: int = DEFAULT_LIFETIME_MS,
        retries: int = DEFAULT_RETRIES,
        sign: InterestSigner | None = None,
        app_params: bytes | None = None,
        validate: DataValidator | None = None,
        window: int = DEFAULT_WINDOW,
    ) -> bytes:
        """Fetch a (possibly segmented) content object by name.

        Fetches segment 0, reads the final-segment marker, pipelines the
        remaining segments, and reassembles the payload in order.
        """

        def fetch(index: int) -> DataPacket:
            interest = InterestPacket(
                segment_name(name, index), lifetime_ms=lifetime_ms, app_params=app_params
            )
            if sign is not None:
                interest = sign(interest)
            return self.express_interest(interest, retries=retries, validate=validate)

        first = fetch(0)
        final = first.final_segment or 0
        segments = [first]
        if final > 0:
            with ThreadPoolExecutor(max_workers=min(window, final)) as pool:
                segments.extend(pool.map(fetch, range(1, final + 1)))
        return reassemble(segments)

    def get_packet(
        self,
        name: Name,
        *,
        lifetime_ms: int = DEFAULT_LIFETIME_MS,
        retries: int = DEFAULT_RETRIES,
        sign: InterestSigner | None = None,
        app_params: bytes | None = None,
        validate: DataValidator | None = None,
    ) -> DataPacket:
        """Single-segment fetch returning the raw first Data packet."""
        interest = InterestPacket(
            segment_name(name, 0), lifetime_ms=lifetime_ms, app_params=app_params
        )
        if sign is not None:
            interest = sign(interest)
        return self.express_interest(interest, retries=retries, validate=validate)

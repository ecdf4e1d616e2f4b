"""Producer side: serve named content under registered prefixes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

from geoshard.icn.faces import Face
from geoshard.icn.names import Name
from geoshard.icn.packets import (
    DEFAULT_MAX_PAYLOAD,
    DataPacket,
    InterestPacket,
    Packet,
    segment,
    split_segment_name,
)


@dataclass
class ProducerReply:
    """Payload to publish in response to an Interest."""

    payload: bytes
    freshness_ms: int = 0
    sign: Callable[[DataPacket], DataPacket] | None = None
    max_payload: int = DEFAULT_MAX_PAYLOAD


# A handler returns None to drop the Interest (no reply), a ProducerReply to
# have the producer segment and optionally sign it, or a prebuilt segment
# list (the application manages its own caching in that case).
Handler = Callable[[Name, InterestPacket], Union[ProducerReply, list[DataPacket], None]]


class Producer:
    def __init__(self, face: Face, label: str = "producer"):
        self.face = face
        self.label = label
        self._routes: list[tuple[Name, Handler]] = []
        face.on_receive = self._on_packet

    def serve(self, prefix: Name, handler: Handler) -> None:
        self._routes.append((prefix, handler))
        self._routes.sort(key=lambda rh: -len(rh[0]))  # longest prefix first

    def _on_packet(self, pkt: Packet) -> None:
        if not isinstance(pkt, InterestPacket):
            return
        base, seg_index = split_segment_name(pkt.name)
        seg_index = seg_index or 0
        for prefix, handler in self._routes:
            if prefix.is_prefix_of(base):
                reply = handler(base, pkt)
                break
        else:
            return
        if reply is None:
            return
        if isinstance(reply, ProducerReply):
            segments = segment(
                base,
                reply.payload,
                max_payload=reply.max_payload,
                freshness_ms=reply.freshness_ms,
                sign=reply.sign,
            )
        else:
            segments = reply
        if seg_index < len(segments):
            self.face.send(segments[seg_index])

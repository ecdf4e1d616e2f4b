"""Stored-object payloads and level-replication packaging.

A stored object is a signed Data packet named
``ndn:/<tile-prefix>/DATA/<tid>/<cid>/<uid>/<oid>``. The single master copy
carries the GeoJSON bytes; every other intersecting tile, at every level,
holds a reference whose payload is just the master's name. The payload
header also carries the optional validity interval so engines can filter
temporal sub-queries without parsing GeoJSON.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

from geoshard.geogrid import Feature, LEVELS, TileId, intersecting_tiles
from geoshard.icn.names import Name
from geoshard.icn.packets import DataPacket
from geoshard.naming import object_name, parse_object_name, tile_prefix

_FLAG_REFERENCE = 0x01
_FLAG_INTERVAL = 0x02


class ObjectFormatError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class ObjectPayload:
    is_reference: bool
    valid_time: tuple[int, int] | None
    body: bytes  # GeoJSON bytes for masters, master name URI for references

    @property
    def master_name(self) -> Name:
        if not self.is_reference:
            raise ObjectFormatError("masters carry data, not a master name")
        return Name.parse(self.body.decode())


def encode_object_payload(
    is_reference: bool, valid_time: tuple[int, int] | None, body: bytes
) -> bytes:
    flags = (_FLAG_REFERENCE if is_reference else 0) | (_FLAG_INTERVAL if valid_time else 0)
    head = bytes([flags])
    if valid_time:
        head += struct.pack("!qq", valid_time[0], valid_time[1])
    return head + body


def decode_object_payload(raw: bytes) -> ObjectPayload:
    if not raw:
        raise ObjectFormatError("empty object payload")
    flags = raw[0]
    pos = 1
    valid_time = None
    if flags & _FLAG_INTERVAL:
        if len(raw) < pos + 16:
            raise ObjectFormatError("truncated validity interval")
        valid_time = struct.unpack_from("!qq", raw, pos)
        pos += 16
    return ObjectPayload(bool(flags & _FLAG_REFERENCE), valid_time, raw[pos:])


def replication_tiles(feature: Feature) -> list[TileId]:
    """Every intersecting tile at every level (level-replication)."""
    tiles: list[TileId] = []
    for level in LEVELS:
        tiles.extend(sorted(intersecting_tiles(feature.geometry, level)))
    return tiles


def master_tile(feature: Feature) -> TileId:
    """The lexicographically smallest intersecting level-2 tile hosts the master."""
    candidates = intersecting_tiles(feature.geometry, max(LEVELS))
    return min(candidates, key=lambda t: tile_prefix(t).components)


def build_object_packets(
    feature: Feature,
    sign: Callable[[DataPacket], DataPacket],
    freshness_ms: int = 3_600_000,
) -> list[tuple[TileId, DataPacket]]:
    """One signed packet per intersecting tile: one master, the rest references."""
    m_tile = master_tile(feature)
    m_name = object_name(m_tile, feature.tid, feature.cid, feature.uid, feature.oid)
    master_body = encode_object_payload(False, feature.valid_time, feature.to_json_bytes())
    ref_body = encode_object_payload(True, feature.valid_time, str(m_name).encode())
    out = []
    for tile in replication_tiles(feature):
        name = object_name(tile, feature.tid, feature.cid, feature.uid, feature.oid)
        body = master_body if name == m_name else ref_body
        out.append((tile, sign(DataPacket(name=name, payload=body, freshness_ms=freshness_ms))))
    return out


@dataclass(frozen=True, slots=True)
class StoredObject:
    """Engine-side row: the parsed identity plus the encoded signed packet."""

    name: Name
    tile: TileId
    tid: str
    cid: str
    uid: str
    oid: str
    is_reference: bool
    valid_time: tuple[int, int] | None
    packet: DataPacket

    @classmethod
    def from_packet(cls, pkt: DataPacket) -> "StoredObject":
        info = parse_object_name(pkt.name)
        payload = decode_object_payload(pkt.payload)
        return cls(
            pkt.name,
            info.tile,
            info.tid,
            info.cid,
            info.uid,
            info.oid,
            payload.is_reference,
            payload.valid_time,
            pkt,
        )

    def overlaps_seconds(self, start_s: int, end_s: int) -> bool:
        """Closed-interval overlap; objects without validity are always valid."""
        if self.valid_time is None:
            return True
        a, b = self.valid_time
        return a < end_s and b >= start_s

"""Name schemes for stored objects, tile queries, address resolution and commands.

  object    ndn:/<tile-prefix>/DATA/<tid>/<cid>/<uid>/<oid>
  query     ndn:/<tile-prefix>/TILE/<tid>/<cid>[/T/<size-min>/<start-min>]
  address   ndn:/<tile-prefix>/IP-RES
  delete    <object name>/DELETE
  key loc.  ndn:/CERT/<did>/<uid>/<permission>

The generic (non-geographic) scheme used by the address-book style demo is
  object    /<sid>/<did>/<uid>/<suffix>      query  /<sid>/<did>/<condition>
"""

from __future__ import annotations

from dataclasses import dataclass

from geoshard.geogrid import GPS_ID, ROOT_COMPONENT, GridError, TileId, parse_tile_prefix, tile_prefix
from geoshard.icn.names import Name

DATA_MARK = "DATA"
TILE_MARK = "TILE"
IP_RES_MARK = "IP-RES"
DELETE_MARK = "DELETE"
TEMPORAL_MARK = "T"
CERT_ROOT = "CERT"
SYSTEM_DID = "sys"

BF_PREFIX = Name((ROOT_COMPONENT, "BF"))
BF_MEMBER_PREFIX = BF_PREFIX / "member"
BF_UPDATE_PREFIX = BF_PREFIX / "update"


class NameSchemeError(ValueError):
    """Name does not match any known scheme."""


def did_of(tid: str, cid: str) -> str:
    """Map the (tenant, collection) pair onto a single data-set identifier."""
    return f"{tid}.{cid}"


def tenant_of_did(did: str) -> str:
    return did.split(".", 1)[0]


def route_prefix(tile: TileId) -> Name:
    """FIB prefix of a tile: the tile prefix without the GPS-ID terminator.

    Dropping the terminator is what lets one level-0 route cover every
    descendant tile name by longest-prefix match.
    """
    return tile_prefix(tile)[:-1]


def object_name(tile: TileId, tid: str, cid: str, uid: str, oid: str) -> Name:
    return tile_prefix(tile).append(DATA_MARK, tid, cid, uid, oid)


def tile_query_name(
    tile: TileId, tid: str, cid: str, period: tuple[int, int] | None = None
) -> Name:
    """Query name for one (tile, tenant, collection); period is (start, size) minutes."""
    n = tile_prefix(tile).append(TILE_MARK, tid, cid)
    if period is not None:
        start, size = period
        n = n.append(TEMPORAL_MARK, str(size), str(start))
    return n


def ip_res_name(tile: TileId) -> Name:
    return tile_prefix(tile) / IP_RES_MARK


def delete_name(oname: Name) -> Name:
    return oname / DELETE_MARK


def key_locator_name(did: str, uid: str, permission: str) -> Name:
    if permission not in ("r", "rw"):
        raise NameSchemeError(f"permission must be r or rw, got {permission!r}")
    return Name((CERT_ROOT, did, uid, permission))


@dataclass(frozen=True, slots=True)
class KeyLocatorInfo:
    did: str
    uid: str
    permission: str


def parse_key_locator(kl: Name) -> KeyLocatorInfo:
    c = kl.components
    if len(c) != 4 or c[0] != CERT_ROOT or c[3] not in ("r", "rw"):
        raise NameSchemeError(f"bad key locator: {kl}")
    return KeyLocatorInfo(c[1], c[2], c[3])


@dataclass(frozen=True, slots=True)
class ObjectNameInfo:
    tile: TileId
    tid: str
    cid: str
    uid: str
    oid: str

    @property
    def did(self) -> str:
        return did_of(self.tid, self.cid)


@dataclass(frozen=True, slots=True)
class TileQueryInfo:
    tile: TileId
    tid: str
    cid: str
    period: tuple[int, int] | None  # (start, size) minutes

    @property
    def did(self) -> str:
        return did_of(self.tid, self.cid)


def _split_tile(name: Name, mark: str) -> tuple[TileId, tuple[str, ...]]:
    comps = name.components
    try:
        gps = comps.index(GPS_ID)
    except ValueError:
        raise NameSchemeError(f"no tile prefix in {name}") from None
    try:
        tile = parse_tile_prefix(Name(comps[: gps + 1]))
    except GridError as exc:
        raise NameSchemeError(str(exc)) from None
    rest = comps[gps + 1 :]
    if not rest or rest[0] != mark:
        raise NameSchemeError(f"expected {mark} after tile prefix in {name}")
    return tile, rest[1:]


def parse_object_name(name: Name) -> ObjectNameInfo:
    tile, rest = _split_tile(name, DATA_MARK)
    if len(rest) != 4:
        raise NameSchemeError(f"bad object name: {name}")
    return ObjectNameInfo(tile, *rest)


def parse_tile_query_name(name: Name) -> TileQueryInfo:
    tile, rest = _split_tile(name, TILE_MARK)
    if len(rest) == 2:
        return TileQueryInfo(tile, rest[0], rest[1], None)
    if len(rest) == 5 and rest[2] == TEMPORAL_MARK:
        try:
            size, start = int(rest[3]), int(rest[4])
        except ValueError:
            raise NameSchemeError(f"bad period components in {name}") from None
        return TileQueryInfo(tile, rest[0], rest[1], (start, size))
    raise NameSchemeError(f"bad tile query name: {name}")


def parse_delete_name(name: Name) -> ObjectNameInfo:
    if not len(name) or name[-1] != DELETE_MARK:
        raise NameSchemeError(f"not a delete command: {name}")
    return parse_object_name(name[:-1])


def is_ogb_name(name: Name) -> bool:
    return len(name) > 0 and name[0] == ROOT_COMPONENT


# --- generic (non-geographic) scheme ----------------------------------------


@dataclass(frozen=True, slots=True)
class GenericNameInfo:
    sid: str
    did: str
    uid: str | None  # None for query names


def parse_generic_object_name(name: Name) -> GenericNameInfo:
    c = name.components
    if len(c) != 4:
        raise NameSchemeError(f"generic object names have 4 components: {name}")
    return GenericNameInfo(c[0], c[1], c[2])


def parse_generic_query_name(name: Name) -> GenericNameInfo:
    c = name.components
    if len(c) != 3:
        raise NameSchemeError(f"generic query names have 3 components: {name}")
    return GenericNameInfo(c[0], c[1], None)


def parse_generic_delete_name(name: Name) -> GenericNameInfo:
    if not len(name) or name[-1] != DELETE_MARK:
        raise NameSchemeError(f"not a delete command: {name}")
    return parse_generic_object_name(name[:-1])

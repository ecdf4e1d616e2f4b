"""Back-end database engine.

Stores per-tile object rows in three per-level name tables, answers
tile-queries with signed tile containers (served from an invalidating
application-layer cache when possible), resolves its own bulk-insert
address, applies the access-control table to every operation, and keeps a
counting Bloom filter over (tile-prefix, tenant, collection) groups whose
0->1 / 1->0 bucket transitions are published to the filter server.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from geoshard.bloom import CountingBloomFilter, bf_key
from geoshard.geogrid import LEVELS, TileId
from geoshard.icn.clock import system_clock
from geoshard.icn.names import Name
from geoshard.icn.packets import (
    DataPacket,
    InterestPacket,
    decode_packet,
    encode_packet,
    encode_packet_stream,
    segment,
)
from geoshard.icn.producer import Producer, ProducerReply
from geoshard.naming import (
    DATA_MARK,
    DELETE_MARK,
    IP_RES_MARK,
    NameSchemeError,
    TILE_MARK,
    parse_delete_name,
    parse_tile_query_name,
    route_prefix,
)
from geoshard.objects import StoredObject
from geoshard.trust import (
    AccessOp,
    Identity,
    ValidationError,
    Validator,
    check_access,
    data_signer,
)

log = logging.getLogger(__name__)

STATUS_OK = 0
STATUS_BAD_SIGNATURE = 1
STATUS_DENIED = 2
STATUS_DUPLICATE = 3
STATUS_MALFORMED = 4
STATUS_WRONG_SHARD = 5

STATUS_LABELS = {
    STATUS_OK: "ok",
    STATUS_BAD_SIGNATURE: "bad-signature",
    STATUS_DENIED: "denied",
    STATUS_DUPLICATE: "duplicate",
    STATUS_MALFORMED: "malformed",
    STATUS_WRONG_SHARD: "wrong-shard",
}

DELETE_OK = b"OK"
DELETE_NOT_FOUND = b"NOT-FOUND"
DELETE_DENIED = b"DENIED"


@dataclass
class CostModel:
    """Per-query processing cost injected when emulating loaded hardware."""

    c1_ms: float = 3.0
    c2_ms: float = 0.008
    c3_ms: float = 20.0
    p_db: float = 0.85

    @property
    def p_qh(self) -> float:
        return 1.0 - self.p_db

    def query_ms(self, n_items: int) -> float:
        return self.c1_ms + self.c2_ms * n_items


@dataclass
class EngineConfig:
    node_id: str
    tiles: tuple[TileId, ...]  # owned level-0 tiles
    qdata_freshness_ms: int = 0  # query responses are non-cacheable by default
    odata_freshness_ms: int = 3_600_000
    ipres_freshness_ms: int = 60_000
    bulk_endpoint: str = ""  # "host:port" or "inproc:<node>"; filled on start
    bf_params: tuple[int, int] | None = None  # (m, h), shared cluster-wide
    cost: CostModel | None = None
    qdata_cache_enabled: bool = True
    max_payload: int = 8192

    def __post_init__(self):
        if any(t.level != 0 for t in self.tiles):
            raise ValueError("engines own level-0 tiles")


@dataclass
class EngineStats:
    tile_queries: int = 0
    index_lookups: int = 0
    qdata_hits: int = 0
    qdata_invalidations: int = 0
    denied_queries: int = 0
    denied_inserts: int = 0
    denied_deletes: int = 0
    inserts: int = 0
    deletes: int = 0
    ip_resolutions: int = 0
    object_fetches: int = 0


class DatabaseEngine:
    """One shard: owns a set of level-0 tiles and everything below them."""

    def __init__(
        self,
        config: EngineConfig,
        identity: Identity,
        validator: Validator,
        clock: Callable[[], float] = system_clock,
    ):
        self.config = config
        self.identity = identity
        self.validator = validator
        self.clock = clock
        self.stats = EngineStats()
        self._sign = data_signer(identity)
        self._state = threading.RLock()
        self._proc = threading.Lock()  # serializes injected processing cost
        self.objects: dict[Name, StoredObject] = {}
        # one name table per grid level: tile prefix -> object names
        self.tile_tables: list[dict[Name, set[Name]]] = [dict() for _ in LEVELS]
        self._groups: dict[tuple[Name, str, str], set[Name]] = {}
        self._qdata: dict[Name, list[DataPacket]] = {}
        self._qdata_by_prefix: dict[Name, set[Name]] = {}
        self._odata_cache: OrderedDict[Name, list[DataPacket]] = OrderedDict()
        self._owned_prefixes = tuple(route_prefix(t) for t in config.tiles)
        self.cbf = (
            CountingBloomFilter(*config.bf_params) if config.bf_params is not None else None
        )
        # set by the cluster: publishes (direction, bucket list) to the BF server
        self.bf_publish: Optional[Callable[[int, list[int]], None]] = None

    # --- ownership ---------------------------------------------------------

    def owns(self, tile: TileId) -> bool:
        anc = tile
        while anc.level > 0:
            anc = TileId(anc.level - 1, anc.lng_idx // 10, anc.lat_idx // 10)
        return anc in self.config.tiles

    def route_prefixes(self) -> tuple[Name, ...]:
        return self._owned_prefixes

    # --- producer wiring ----------------------------------------------------

    def attach(self, producer: Producer) -> None:
        for prefix in self._owned_prefixes:
            producer.serve(prefix, self.handle_interest)

    def handle_interest(self, base: Name, interest: InterestPacket):
        try:
            if base[-1] == DELETE_MARK:
                return self.handle_delete(base, interest)
            if TILE_MARK in base.components:
                return self.handle_tile_query(base, interest)
            if base[-1] == IP_RES_MARK:
                return self.handle_ip_res(base, interest)
            if DATA_MARK in base.components:
                return self.handle_object_fetch(base, interest)
        except NameSchemeError as exc:
            log.debug("%s: malformed name %s (%s)", self.config.node_id, base, exc)
            return None
        return None

    # --- tile queries --------------------------------------------------------

    def _inject_query_cost(self, n_items: int) -> None:
        cost = self.config.cost
        if cost is None:
            return
        delay = cost.query_ms(n_items) * cost.p_db / 1000.0
        with self._proc:  # one query at a time, like a single local DBMS
            time.sleep(delay)

    def handle_tile_query(self, base: Name, interest: InterestPacket):
        self.stats.tile_queries += 1
        info = parse_tile_query_name(base)
        if not self.owns(info.tile):
            return None
        try:
            cert = self.validator.verify_interest(interest)
            decision = check_access(AccessOp.QUERY, base, cert.kl_name)
            if not decision.allow:
                raise ValidationError(decision.reason)
            if self.validator.chain_tenant(cert) != info.tid:
                raise ValidationError(f"issuer not certified by tenant {info.tid}")
        except ValidationError as exc:
            self.stats.denied_queries += 1
            log.debug("%s: query denied for %s: %s", self.config.node_id, base, exc)
            return None  # dropped; the consumer sees a timeout
        if self.config.cost is not None:
            with self._state:
                group = self._groups.get((route_prefix(info.tile), info.tid, info.cid), ())
                n_items = len(group)
            self._inject_query_cost(n_items)
        with self._state:
            if self.config.qdata_cache_enabled:
                cached = self._qdata.get(base)
                if cached is not None:
                    self.stats.qdata_hits += 1
                    return cached
            rows = self._select(info.tile, info.tid, info.cid, info.period)
            payload = encode_packet_stream(r.packet for r in rows)
            segments = segment(
                base,
                payload,
                max_payload=self.config.max_payload,
                freshness_ms=self.config.qdata_freshness_ms,
                sign=self._sign,
            )
            if self.config.qdata_cache_enabled:
                self._qdata[base] = segments
                self._qdata_by_prefix.setdefault(route_prefix(info.tile), set()).add(base)
            return segments

    def _select(
        self, tile: TileId, tid: str, cid: str, period: tuple[int, int] | None
    ) -> list[StoredObject]:
        self.stats.index_lookups += 1
        names = self._groups.get((route_prefix(tile), tid, cid), set())
        rows = [self.objects[n] for n in sorted(names)]
        if period is not None:
            start, size = period
            p0, p1 = start * 60, (start + size) * 60
            rows = [r for r in rows if r.overlaps_seconds(p0, p1)]
        return rows

    def select_names(
        self, tile: TileId, tid: str, cid: str, period: tuple[int, int] | None = None
    ) -> list[Name]:
        """Names in the level-matching table under this prefix and group."""
        with self._state:
            return [r.name for r in self._select(tile, tid, cid, period)]

    # --- address resolution ---------------------------------------------------

    def handle_ip_res(self, base: Name, interest: InterestPacket):
        from geoshard.geogrid import parse_tile_prefix

        tile = parse_tile_prefix(base[:-1])
        if not self.owns(tile):
            return None
        self.stats.ip_resolutions += 1
        return ProducerReply(
            self.config.bulk_endpoint.encode(),
            freshness_ms=self.config.ipres_freshness_ms,
            sign=self._sign,
        )

    # --- direct object fetch ---------------------------------------------------

    def handle_object_fetch(self, base: Name, interest: InterestPacket):
        with self._state:
            cached = self._odata_cache.get(base)
            if cached is not None:
                self._odata_cache.move_to_end(base)
                return cached
            row = self.objects.get(base)
            if row is None:
                return None
            self.stats.object_fetches += 1
            segments = segment(
                base,
                encode_packet_stream([row.packet]),
                max_payload=self.config.max_payload,
                freshness_ms=self.config.odata_freshness_ms,
                sign=self._sign,
            )
            self._odata_cache[base] = segments
            while len(self._odata_cache) > 256:
                self._odata_cache.popitem(last=False)
            return segments

    # --- writes -----------------------------------------------------------------

    def bulk_insert(self, packets: Iterable[DataPacket]) -> list[int]:
        """Validate and commit a batch; one status per object, in order."""
        statuses: list[int] = []
        ups: list[int] = []
        with self._state:
            for pkt in packets:
                statuses.append(self._insert_one(pkt, ups))
        self._publish(0, ups)
        return statuses

    def _insert_one(self, pkt: DataPacket, ups: list[int]) -> int:
        try:
            row = StoredObject.from_packet(pkt)
        except (NameSchemeError, ValueError):
            return STATUS_MALFORMED
        if not self.owns(row.tile):
            return STATUS_WRONG_SHARD
        try:
            cert = self.validator.verify_data(pkt)
            decision = check_access(AccessOp.INSERT, pkt.name, cert.kl_name)
            if not decision.allow:
                raise ValidationError(decision.reason)
            if self.validator.chain_tenant(cert) != row.tid:
                raise ValidationError(f"issuer not certified by tenant {row.tid}")
        except ValidationError as exc:
            self.stats.denied_inserts += 1
            log.debug("%s: insert denied for %s: %s", self.config.node_id, pkt.name, exc)
            return STATUS_BAD_SIGNATURE if pkt.signature is None else STATUS_DENIED
        if row.name in self.objects:
            return STATUS_DUPLICATE
        self.objects[row.name] = row
        prefix = route_prefix(row.tile)
        self.tile_tables[row.tile.level].setdefault(prefix, set()).add(row.name)
        group_key = (prefix, row.tid, row.cid)
        group = self._groups.setdefault(group_key, set())
        group.add(row.name)
        if len(group) == 1 and self.cbf is not None:
            ups.extend(self.cbf.add(bf_key(str(prefix), row.tid, row.cid)))
        self._invalidate(prefix)
        self.stats.inserts += 1
        return STATUS_OK

    def handle_delete(self, base: Name, interest: InterestPacket):
        info = parse_delete_name(base)
        if not self.owns(info.tile):
            return None
        try:
            cert = self.validator.verify_interest(interest)
            decision = check_access(AccessOp.DELETE, base, cert.kl_name)
            if not decision.allow:
                raise ValidationError(decision.reason)
            if self.validator.chain_tenant(cert) != info.tid:
                raise ValidationError(f"issuer not certified by tenant {info.tid}")
        except ValidationError as exc:
            self.stats.denied_deletes += 1
            log.debug("%s: delete denied for %s: %s", self.config.node_id, base, exc)
            return ProducerReply(DELETE_DENIED, freshness_ms=0, sign=self._sign)
        oname = base[:-1]
        downs: list[int] = []
        with self._state:
            row = self.objects.pop(oname, None)
            if row is None:
                status = DELETE_NOT_FOUND
            else:
                prefix = route_prefix(row.tile)
                self.tile_tables[row.tile.level].get(prefix, set()).discard(oname)
                group_key = (prefix, row.tid, row.cid)
                group = self._groups.get(group_key)
                if group is not None:
                    group.discard(oname)
                    if not group:
                        del self._groups[group_key]
                        if self.cbf is not None:
                            downs.extend(self.cbf.remove(bf_key(str(prefix), row.tid, row.cid)))
                self._odata_cache.pop(oname, None)
                self._invalidate(prefix)
                self.stats.deletes += 1
                status = DELETE_OK
        self._publish(1, downs)
        return ProducerReply(status, freshness_ms=0, sign=self._sign)

    def _invalidate(self, prefix: Name) -> None:
        stale = self._qdata_by_prefix.pop(prefix, None)
        if stale:
            for qname in stale:
                self._qdata.pop(qname, None)
            self.stats.qdata_invalidations += len(stale)

    def _publish(self, direction: int, buckets: list[int]) -> None:
        # outside the state lock: publishing travels the fabric
        if buckets and self.bf_publish is not None:
            self.bf_publish(direction, buckets)

    # --- introspection -----------------------------------------------------------

    def group_count(self, tile: TileId, tid: str, cid: str) -> int:
        with self._state:
            return len(self._groups.get((route_prefix(tile), tid, cid), ()))

    def non_void_groups(self) -> set[tuple[str, str, str]]:
        with self._state:
            return {(str(p), t, c) for (p, t, c), names in self._groups.items() if names}


# --- bulk-insert TCP endpoint ---------------------------------------------------
#
# Wire protocol: the client streams length-prefixed encoded Data packets
# (u32 big-endian length, zero length ends the batch); the server replies
# with u32 count followed by one status byte per object, then waits for the
# next batch on the same connection.

_U32 = struct.Struct("!I")


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


class BulkInsertServer:
    def __init__(self, engine: DatabaseEngine, host: str = "127.0.0.1", port: int = 0):
        self.engine = engine
        self._srv = socket.create_server((host, port))
        self.address = self._srv.getsockname()[:2]
        self._closed = False
        threading.Thread(target=self._accept_loop, daemon=True).start()

    @property
    def endpoint(self) -> str:
        return f"{self.address[0]}:{self.address[1]}"

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                sock, _ = self._srv.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(sock,), daemon=True).start()

    def _serve(self, sock: socket.socket) -> None:
        with sock:
            while True:
                batch: list[DataPacket] = []
                while True:
                    hdr = _read_exact(sock, 4)
                    if hdr is None:
                        return
                    (length,) = _U32.unpack(hdr)
                    if length == 0:
                        break
                    raw = _read_exact(sock, length)
                    if raw is None:
                        return
                    try:
                        pkt = decode_packet(raw)
                    except ValueError:
                        pkt = None
                    batch.append(pkt)
                statuses = []
                valid = [p for p in batch if isinstance(p, DataPacket)]
                results = iter(self.engine.bulk_insert(valid))
                for p in batch:
                    statuses.append(next(results) if isinstance(p, DataPacket) else STATUS_MALFORMED)
                try:
                    sock.sendall(_U32.pack(len(statuses)) + bytes(statuses))
                except OSError:
                    return

    def close(self) -> None:
        self._closed = True
        try:
            self._srv.close()
        except OSError:
            pass


class BulkInsertClient:
    """Client side of the bulk-insert stream."""

    def __init__(self, endpoint: str):
        host, port = endpoint.rsplit(":", 1)
        self._sock = socket.create_connection((host, int(port)), timeout=30)

    def insert(self, packets: list[DataPacket]) -> list[int]:
        chunks = []
        for pkt in packets:
            raw = encode_packet(pkt)
            chunks.append(_U32.pack(len(raw)))
            chunks.append(raw)
        chunks.append(_U32.pack(0))
        self._sock.sendall(b"".join(chunks))
        hdr = _read_exact(self._sock, 4)
        if hdr is None:
            raise ConnectionError("bulk endpoint closed mid-reply")
        (count,) = _U32.unpack(hdr)
        body = _read_exact(self._sock, count)
        if body is None:
            raise ConnectionError("bulk endpoint closed mid-reply")
        return list(body)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

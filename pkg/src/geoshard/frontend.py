"""Front-end library: range queries, insertions, deletions.

A range query runs in two phases: tile-querying (tessellate the box,
optionally pre-filter void tiles through the Bloom server, fan the
tile-queries out in parallel) and post-filtering (validate provenance,
resolve references to masters, keep the objects that actually satisfy the
spatial and temporal predicates).
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

from geoshard.geogrid import (
    BBox,
    Feature,
    Geometry,
    GeometryKind,
    TileId,
    parse_feature,
)
from geoshard.icn.clock import system_clock
from geoshard.icn.consumer import Consumer, GetTimeoutError
from geoshard.icn.names import Name
from geoshard.icn.packets import DataPacket, decode_packet_stream
from geoshard.naming import (
    delete_name,
    ip_res_name,
    object_name,
    parse_object_name,
    route_prefix,
    tile_query_name,
)
from geoshard.objects import build_object_packets, decode_object_payload, replication_tiles
from geoshard.tessellate import PeriodSet, constrained_tessellation, temporal_decompose
from geoshard.trust import (
    Identity,
    ValidationError,
    Validator,
    data_signer,
    interest_signer,
)

log = logging.getLogger(__name__)

DEFAULT_K = 50
DEFAULT_PARALLELISM = 8


class RangeQueryError(Exception):
    """A sub-query failed; the whole range query fails with the name attached."""

    def __init__(self, name: Name, cause: str):
        super().__init__(f"sub-query {name} failed: {cause}")
        self.name = name


class InsertError(Exception):
    pass


@dataclass
class RangeQuery:
    bbox: BBox
    tid: str
    cid: str
    mode: str = "intersect"  # "intersect" or "include"
    interval: tuple[int, int] | None = None
    k: int = DEFAULT_K
    use_bf: bool = False
    parallelism: int = DEFAULT_PARALLELISM

    def __post_init__(self):
        if self.mode not in ("intersect", "include"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.k < 1 or self.parallelism < 1:
            raise ValueError("k and parallelism must be >= 1")


@dataclass
class QueryStats:
    tessellation_ms: float = 0.0
    bf_ms: float = 0.0
    batch_ms: float = 0.0
    postfilter_ms: float = 0.0
    tiles_before: int = 0
    tiles_after: int = 0
    subqueries: int = 0
    validation_warnings: int = 0
    bf_fallback: bool = False


@dataclass
class QueryResult:
    objects: list[Feature]
    stats: QueryStats

    @property
    def oids(self) -> set[str]:
        return {f.oid for f in self.objects}


@dataclass
class InsertReport:
    oid: str
    statuses: list[tuple[Name, int]]

    @property
    def ok(self) -> bool:
        return bool(self.statuses) and all(s == 0 for _, s in self.statuses)


@dataclass
class DeleteReport:
    oid: str
    per_tile: list[tuple[Name, str]]

    @property
    def ok(self) -> bool:
        return bool(self.per_tile) and all(s == "OK" for _, s in self.per_tile)


def _boxes_touch(a: BBox, b: BBox) -> bool:
    return (
        a.min.lng <= b.max.lng
        and b.min.lng <= a.max.lng
        and a.min.lat <= b.max.lat
        and b.min.lat <= a.max.lat
    )


def spatial_match(geometry: Geometry, bbox: BBox, mode: str) -> bool:
    """Intersect: any point inside (closed); include: the whole geometry inside.

    Geometries without native points are judged on their bounding box.
    """
    if geometry.kind is GeometryKind.OTHER:
        if mode == "include":
            return bbox.contains_box(geometry.bbox)
        return _boxes_touch(bbox, geometry.bbox)
    inside = (bbox.contains(p) for p in geometry.points)
    return all(inside) if mode == "include" else any(inside)


def temporal_match(valid_time: tuple[int, int] | None, interval: tuple[int, int] | None) -> bool:
    """Closed-interval overlap; objects without a validity are always valid."""
    if interval is None or valid_time is None:
        return True
    a, b = valid_time
    return a <= interval[1] and b >= interval[0]


class Frontend:
    """One front-end instance; safe for concurrent client calls."""

    def __init__(
        self,
        consumer: Consumer,
        user: Identity,
        validator: Validator,
        *,
        bulk_connect: Callable[[str], "BulkTransport"],
        bf_client=None,
        clock: Callable[[], float] = system_clock,
        lifetime_ms: int = 2000,
        retries: int = 2,
        odata_freshness_ms: int = 3_600_000,
        validate_transport: bool = True,
    ):
        self.consumer = consumer
        self.user = user
        self.validator = validator
        self.bulk_connect = bulk_connect
        self.bf_client = bf_client
        self.clock = clock
        self.lifetime_ms = lifetime_ms
        self.retries = retries
        self.odata_freshness_ms = odata_freshness_ms
        self._sign_interest = interest_signer(user)
        self._sign_data = data_signer(user)
        self._validate = self._transport_validator if validate_transport else None
        self._ipres_cache: dict[Name, tuple[str, float]] = {}
        self._transports: dict[str, BulkTransport] = {}
        self._lock = threading.Lock()

    # --- validation helpers --------------------------------------------------

    def _transport_validator(self, pkt: DataPacket) -> None:
        self.validator.verify_data(pkt)

    def _check_provenance(self, pkt: DataPacket) -> None:
        """The object must be signed by the owner its name claims."""
        cert = self.validator.verify_data(pkt)
        info = parse_object_name(pkt.name)
        kl = cert.info
        if kl.uid != info.uid or kl.did != info.did:
            raise ValidationError(f"{pkt.name} signed by {cert.kl_name}")
        if self.validator.chain_tenant(cert) != info.tid:
            raise ValidationError(f"{pkt.name} signer outside tenant {info.tid}")

    # --- range query ----------------------------------------------------------

    def prefilter(self, tiles: Iterable[TileId], tid: str, cid: str) -> set[TileId]:
        """Keep tiles the Bloom server considers possibly non-void.

        No false negatives relative to engine ground truth; on any Bloom
        service failure the input set is returned unchanged (availability
        over optimization).
        """
        tiles = list(tiles)
        if self.bf_client is None:
            return set(tiles)
        try:
            items = [(str(route_prefix(t)), tid, cid) for t in tiles]
            bits = self.bf_client.membership(items)
            return {t for t, bit in zip(tiles, bits) if bit}
        except Exception as exc:
            log.warning("bloom pre-filter unavailable, querying all tiles: %s", exc)
            return set(tiles)

    def spatio_temporal_subqueries(
        self, tiles: Iterable[TileId], periods: PeriodSet | None, tid: str, cid: str
    ) -> list[Name]:
        """One sub-query name per (tile, period) pair."""
        plist = [None] if periods is None else list(periods.periods)
        return [
            tile_query_name(tile, tid, cid, period)
            for tile in sorted(tiles)
            for period in plist
        ]

    def decompose_complex_query(self, q: RangeQuery) -> list[Name]:
        """Sub-query names for a range query: tessellation x periods."""
        tess = constrained_tessellation(q.bbox, q.k)
        periods = temporal_decompose(q.interval) if q.interval else None
        return self.spatio_temporal_subqueries(tess.tiles, periods, q.tid, q.cid)

    def range_query(self, q: RangeQuery) -> QueryResult:
        stats = QueryStats()
        t0 = self.clock()
        tess = constrained_tessellation(q.bbox, q.k)
        periods = temporal_decompose(q.interval) if q.interval else None
        t1 = self.clock()
        stats.tessellation_ms = (t1 - t0) * 1000
        stats.tiles_before = len(tess.tiles)

        tiles: Iterable[TileId] = tess.tiles
        if q.use_bf and self.bf_client is not None:
            try:
                items = [(str(route_prefix(t)), q.tid, q.cid) for t in tess.tiles]
                bits = self.bf_client.membership(items)
                tiles = [t for t, bit in zip(tess.tiles, bits) if bit]
            except Exception as exc:
                log.warning("bloom pre-filter unavailable, querying all tiles: %s", exc)
                stats.bf_fallback = True
                tiles = tess.tiles
        t2 = self.clock()
        stats.bf_ms = (t2 - t1) * 1000
        tiles = list(tiles)
        stats.tiles_after = len(tiles)

        names = self.spatio_temporal_subqueries(tiles, periods, q.tid, q.cid)
        stats.subqueries = len(names)
        payloads = self._fetch_all(names, q.parallelism)
        t3 = self.clock()
        stats.batch_ms = (t3 - t2) * 1000

        objects = self._collect(payloads, stats)
        kept = [
            f
            for f in objects
            if spatial_match(f.geometry, q.bbox, q.mode) and temporal_match(f.valid_time, q.interval)
        ]
        kept.sort(key=lambda f: f.oid)
        stats.postfilter_ms = (self.clock() - t3) * 1000
        return QueryResult(kept, stats)

    def _fetch_all(self, names: list[Name], parallelism: int) -> list[bytes]:
        def fetch(name: Name) -> bytes:
            try:
                return self.consumer.get(
                    name,
                    lifetime_ms=self.lifetime_ms,
                    retries=self.retries,
                    sign=self._sign_interest,
                    validate=self._validate,
                )
            except GetTimeoutError:
                raise RangeQueryError(name, "timeout") from None
            except ValidationError as exc:
                raise RangeQueryError(name, f"validation: {exc}") from None

        if not names:
            return []
        if len(names) == 1:
            return [fetch(names[0])]
        with ThreadPoolExecutor(max_workers=min(parallelism, len(names))) as pool:
            return list(pool.map(fetch, names))

    def _collect(self, payloads: list[bytes], stats: QueryStats) -> list[Feature]:
        """Validate, dedup by oid, resolve references to masters."""
        features: dict[str, Feature] = {}
        master_cache: dict[Name, Feature] = {}
        for raw in payloads:
            for pkt in decode_packet_stream(raw):
                if not isinstance(pkt, DataPacket):
                    stats.validation_warnings += 1
                    continue
                try:
                    self._check_provenance(pkt)
                    info = parse_object_name(pkt.name)
                    if info.oid in features:
                        continue
                    payload = decode_object_payload(pkt.payload)
                    if payload.is_reference:
                        feature = self._resolve_master(payload.master_name, master_cache)
                    else:
                        feature = parse_feature(payload.body)
                except RangeQueryError:
                    raise
                except (ValidationError, ValueError) as exc:
                    stats.validation_warnings += 1
                    log.warning("dropping object %s: %s", pkt.name, exc)
                    continue
                features[info.oid] = feature
        return list(features.values())

    def _resolve_master(self, master: Name, cache: dict[Name, Feature]) -> Feature:
        got = cache.get(master)
        if got is not None:
            return got
        try:
            raw = self.consumer.get(
                master,
                lifetime_ms=self.lifetime_ms,
                retries=self.retries,
                sign=self._sign_interest,
                validate=self._validate,
            )
        except GetTimeoutError:
            raise RangeQueryError(master, "master fetch timeout") from None
        inner = decode_packet_stream(raw)
        if len(inner) != 1:
            raise ValidationError(f"master fetch for {master} returned {len(inner)} packets")
        pkt = inner[0]
        self._check_provenance(pkt)
        payload = decode_object_payload(pkt.payload)
        if payload.is_reference:
            raise ValidationError(f"{master} resolved to another reference")
        feature = parse_feature(payload.body)
        cache[master] = feature
        return feature

    # --- insert -----------------------------------------------------------------

    def _resolve_endpoint(self, tile_l0: TileId) -> str:
        key = route_prefix(tile_l0)
        now = self.clock()
        with self._lock:
            cached = self._ipres_cache.get(key)
            if cached is not None and cached[1] > now:
                return cached[0]
        pkt = self.consumer.get_packet(
            ip_res_name(tile_l0), lifetime_ms=self.lifetime_ms, retries=self.retries,
            validate=self._validate,
        )
        endpoint = pkt.payload.decode()
        with self._lock:
            self._ipres_cache[key] = (endpoint, now + pkt.freshness_ms / 1000.0)
        return endpoint

    def _transport(self, endpoint: str) -> "BulkTransport":
        with self._lock:
            t = self._transports.get(endpoint)
            if t is None:
                t = self.bulk_connect(endpoint)
                self._transports[endpoint] = t
            return t

    def insert(self, source) -> InsertReport:
        """Package a feature (master + references), resolve the responsible
        engines, and push over the bulk stream."""
        feature = source if isinstance(source, Feature) else parse_feature(source)
        packets = build_object_packets(feature, self._sign_data, self.odata_freshness_ms)
        by_endpoint: dict[str, list] = {}
        for tile, pkt in packets:
            l0 = tile
            while l0.level > 0:
                l0 = TileId(l0.level - 1, l0.lng_idx // 10, l0.lat_idx // 10)
            try:
                endpoint = self._resolve_endpoint(l0)
            except GetTimeoutError:
                raise InsertError(f"address resolution timed out for {route_prefix(l0)}") from None
            by_endpoint.setdefault(endpoint, []).append(pkt)
        statuses: list[tuple[Name, int]] = []
        for endpoint, pkts in sorted(by_endpoint.items()):
            results = self._transport(endpoint).insert(pkts)
            statuses.extend((p.name, s) for p, s in zip(pkts, results))
        return InsertReport(feature.oid, statuses)

    # --- delete -----------------------------------------------------------------

    def delete(self, oid: str, tid: str, cid: str, uid: str, geometry) -> DeleteReport:
        """One delete command per intersecting tile at every level.

        The geometry (a Geometry or a GeoJSON geometry object) is required to
        enumerate the tiles the object was replicated to.
        """
        geom = geometry if isinstance(geometry, Geometry) else _parse_geometry(geometry)
        fake = Feature(oid, tid, uid, cid, geom, None, {}, {})
        per_tile: list[tuple[Name, str]] = []
        for tile in replication_tiles(fake):
            oname = object_name(tile, tid, cid, uid, oid)
            dname = delete_name(oname)
            try:
                raw = self.consumer.get(
                    dname,
                    lifetime_ms=self.lifetime_ms,
                    retries=self.retries,
                    sign=self._sign_interest,
                    validate=self._validate,
                )
                per_tile.append((oname, raw.decode()))
            except GetTimeoutError:
                per_tile.append((oname, "TIMEOUT"))
        return DeleteReport(oid, per_tile)

    def close(self) -> None:
        with self._lock:
            for t in self._transports.values():
                close = getattr(t, "close", None)
                if close:
                    close()
            self._transports.clear()


def _parse_geometry(geom: dict) -> Geometry:
    wrapper = {
        "type": "Feature",
        "geometry": geom,
        "properties": {"oid": "x", "tid": "x", "uid": "x", "cid": "x"},
    }
    return parse_feature(wrapper).geometry


class BulkTransport:
    """Anything with insert(list[DataPacket]) -> list[int]."""

    def insert(self, packets) -> list[int]:  # pragma: no cover - interface
        raise NotImplementedError


# --- generic OR-condition decomposition (address-book style demo) -------------


def split_or_conditions(
    did: str, field_name: str, values: Iterable[str], shard_of: Callable[[str], str]
) -> list[Name]:
    """One sub-query name per OR term: /<sid>/<did>/<field>=<value>."""
    return [Name((shard_of(v), did, f"{field_name}={v}")) for v in values]


# --- request/response service endpoint ----------------------------------------


class _ServiceHandler(socketserver.StreamRequestHandler):
    def handle(self):
        frontend: Frontend = self.server.frontend  # type: ignore[attr-defined]
        for line in self.rfile:
            line = line.strip()
            if not line:
                continue
            try:
                response = _dispatch(frontend, json.loads(line))
            except Exception as exc:  # surface the failure to the caller
                response = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
            self.wfile.write(json.dumps(response).encode() + b"\n")
            self.wfile.flush()


def _dispatch(frontend: Frontend, req: dict) -> dict:
    op = req.get("op")
    if op == "range_query":
        q = RangeQuery(
            bbox=BBox.of(*req["bbox"]),
            tid=req["tid"],
            cid=req["cid"],
            mode=req.get("mode", "intersect"),
            interval=tuple(req["interval"]) if req.get("interval") else None,
            k=req.get("k", DEFAULT_K),
            use_bf=req.get("use_bf", False),
            parallelism=req.get("parallelism", DEFAULT_PARALLELISM),
        )
        result = frontend.range_query(q)
        return {
            "ok": True,
            "objects": [f.raw for f in result.objects],
            "stats": result.stats.__dict__,
        }
    if op == "insert":
        report = frontend.insert(req["feature"])
        return {
            "ok": report.ok,
            "oid": report.oid,
            "statuses": [[str(n), s] for n, s in report.statuses],
        }
    if op == "delete":
        report = frontend.delete(
            req["oid"], req["tid"], req["cid"], req["uid"], req["geometry"]
        )
        return {"ok": report.ok, "oid": report.oid,
                "statuses": [[str(n), s] for n, s in report.per_tile]}
    raise ValueError(f"unknown op {op!r}")


class FrontendService:
    """Line-delimited JSON over TCP exposing range_query/insert/delete."""

    def __init__(self, frontend: Frontend, host: str = "127.0.0.1", port: int = 0):
        self._server = socketserver.ThreadingTCPServer((host, port), _ServiceHandler, bind_and_activate=True)
        self._server.daemon_threads = True
        self._server.frontend = frontend  # type: ignore[attr-defined]
        self.address = self._server.server_address[:2]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class ServiceClient:
    """Driver-side client for the JSON service."""

    def __init__(self, host: str, port: int):
        self._sock = socket.create_connection((host, port), timeout=60)
        self._file = self._sock.makefile("rwb")
        self._lock = threading.Lock()

    def call(self, request: dict) -> dict:
        with self._lock:
            self._file.write(json.dumps(request).encode() + b"\n")
            self._file.flush()
            line = self._file.readline()
        if not line:
            raise ConnectionError("service closed the connection")
        return json.loads(line)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

import json
import random
import threading

import pytest

from geoshard.cluster import Cluster, ClusterSpec, UserSpec, parse_cluster_config
from geoshard.engine import STATUS_OK
from geoshard.frontend import (
    RangeQuery,
    RangeQueryError,
    ServiceClient,
    split_or_conditions,
)
from geoshard.geogrid import BBox, FeatureError, TileId, parse_feature
from geoshard.icn.names import Name
from geoshard.tessellate import temporal_decompose
from geoshard.trust import SCHEME_HMAC


def make_spec(**kw):
    base = dict(
        engines={
            "e1": [TileId.at(0, 12, 41)],
            "e2": [TileId.at(0, 13, 41)],
            "e3": [TileId.at(0, 12, 42)],
            "e4": [TileId.at(0, 13, 42)],
        },
        tenants={"Foo": ["poi"], "Bar": ["poi"]},
        users=[
            UserSpec("Foo", "poi", "u1", "rw"),
            UserSpec("Foo", "poi", "u2", "rw"),
            UserSpec("Foo", "poi", "r1", "r"),
            UserSpec("Bar", "poi", "w1", "rw"),
        ],
        scheme=SCHEME_HMAC,
        fe_lifetime_ms=500,
        fe_retries=1,
    )
    base.update(kw)
    return ClusterSpec(**base)


@pytest.fixture(scope="module")
def cluster():
    c = Cluster(make_spec())
    yield c
    c.close()


def feature_dict(oid, coords, tid="Foo", uid="u1", cid="poi", valid=None, multi=False):
    geom = (
        {"type": "MultiPoint", "coordinates": [list(c) for c in coords]}
        if multi
        else {"type": "Point", "coordinates": list(coords)}
    )
    obj = {
        "type": "Feature",
        "geometry": geom,
        "properties": {"oid": oid, "tid": tid, "uid": uid, "cid": cid},
    }
    if valid:
        obj["temporalExtent"] = {"validTime": {"type": "interval", "value": list(valid)}}
    return obj


def test_insert_starbucks_three_rows_single_engine(cluster):
    fe = cluster.frontend_as("Foo", "poi", "u1")
    report = fe.insert(feature_dict("starbucks", (12.51133, 41.8919)))
    assert report.ok
    assert len(report.statuses) == 3  # levels 2, 1, 0
    e1 = cluster.engine("e1")
    assert sum(1 for n in e1.objects if n[-1] == "starbucks") == 3
    masters = [r for r in e1.objects.values() if not r.is_reference and r.oid == "starbucks"]
    assert len(masters) == 1
    # a level-1 tile query now returns it
    res = fe.range_query(RangeQuery(BBox.of(12.5, 41.8, 12.6, 41.9), "Foo", "poi"))
    assert res.oids == {"starbucks"}
    fe.delete("starbucks", "Foo", "poi", "u1", {"type": "Point", "coordinates": [12.51133, 41.8919]})


def test_multipoint_across_engines_one_master(cluster):
    fe = cluster.frontend_as("Foo", "poi", "u1")
    report = fe.insert(
        feature_dict("span2", [(12.2, 41.2), (13.7, 41.7)], multi=True)
    )
    assert report.ok
    assert len(report.statuses) == 6  # two tiles per level
    e1, e2 = cluster.engine("e1"), cluster.engine("e2")
    rows = [r for e in (e1, e2) for r in e.objects.values() if r.oid == "span2"]
    assert len(rows) == 6
    assert sum(1 for r in rows if not r.is_reference) == 1  # one master system-wide
    # intersect query over either side finds it once
    res = fe.range_query(RangeQuery(BBox.of(13.6, 41.6, 13.8, 41.8), "Foo", "poi"))
    assert res.oids == {"span2"}
    fe.delete("span2", "Foo", "poi", "u1",
              {"type": "MultiPoint", "coordinates": [[12.2, 41.2], [13.7, 41.7]]})
    assert not [r for e in (e1, e2) for r in e.objects.values() if r.oid == "span2"]


def test_missing_mandatory_property_rejected_locally(cluster):
    fe = cluster.frontend_as("Foo", "poi", "u1")
    bad = feature_dict("x", (12.1, 41.1))
    del bad["properties"]["cid"]
    before = cluster.engine("e1").stats.inserts
    with pytest.raises(FeatureError):
        fe.insert(bad)
    assert cluster.engine("e1").stats.inserts == before  # nothing pushed


def test_delete_sends_one_command_per_tile(cluster):
    fe = cluster.frontend_as("Foo", "poi", "u1")
    fe.insert(feature_dict("victim", (12.31, 41.31)))
    report = fe.delete("victim", "Foo", "poi", "u1",
                       {"type": "Point", "coordinates": [12.31, 41.31]})
    assert report.ok
    assert len(report.per_tile) == 3
    assert all(status == "OK" for _, status in report.per_tile)
    again = fe.delete("victim", "Foo", "poi", "u1",
                      {"type": "Point", "coordinates": [12.31, 41.31]})
    assert not again.ok
    assert {s for _, s in again.per_tile} == {"NOT-FOUND"}


def test_delete_other_user_denied_everywhere(cluster):
    fe1 = cluster.frontend_as("Foo", "poi", "u1")
    fe2 = cluster.frontend_as("Foo", "poi", "u2")
    fe1.insert(feature_dict("mine", (12.32, 41.32)))
    report = fe2.delete("mine", "Foo", "poi", "u1",
                        {"type": "Point", "coordinates": [12.32, 41.32]})
    assert {s for _, s in report.per_tile} == {"DENIED"}
    fe1.delete("mine", "Foo", "poi", "u1", {"type": "Point", "coordinates": [12.32, 41.32]})


def test_non_tenant_query_gets_no_data(cluster):
    fe_bar = cluster.frontend_as("Bar", "poi", "w1")
    fe1 = cluster.frontend_as("Foo", "poi", "u1")
    fe1.insert(feature_dict("private", (12.41, 41.41)))
    q = RangeQuery(BBox.of(12.405, 41.405, 12.415, 41.415), "Foo", "poi", k=5)
    with pytest.raises(RangeQueryError):
        fe_bar.range_query(q)
    assert cluster.engine("e1").stats.denied_queries > 0
    fe1.delete("private", "Foo", "poi", "u1", {"type": "Point", "coordinates": [12.41, 41.41]})


def test_empty_store_returns_nothing_everywhere(cluster):
    fe = cluster.frontend_as("Foo", "poi", "u2")
    res = fe.range_query(RangeQuery(BBox.of(12.8, 42.8, 13.2, 42.95), "Foo", "poi", k=10))
    assert res.objects == []
    assert res.stats.subqueries > 0  # void tiles answered, not timed out


def test_spatio_temporal_subquery_names(cluster):
    fe = cluster.frontend(None)
    tiles = [TileId.at(2, 12.51, 41.89), TileId.at(2, 12.52, 41.89), TileId.at(1, 12.6, 41.8)]
    periods = temporal_decompose((600, 1800))  # two aligned 10-minute periods
    names = fe.spatio_temporal_subqueries(tiles, periods, "Foo", "poi")
    assert len(names) == len(tiles) * len(periods.periods)
    assert str(names[0]).endswith(f"/T/10/{periods.periods[0][0]}")
    plain = fe.spatio_temporal_subqueries(tiles, None, "Foo", "poi")
    assert len(plain) == 3
    assert all("/T/" not in str(n) for n in plain)


def test_boundary_object_fetched_then_postfiltered(cluster):
    # valid outside the query interval but inside a covering period
    fe = cluster.frontend_as("Foo", "poi", "u1")
    fe.insert(feature_dict("edge", (12.61, 41.61), valid=(1140, 1180)))  # minute 19
    q = RangeQuery(
        BBox.of(12.605, 41.605, 12.615, 41.615),
        "Foo",
        "poi",
        interval=(600, 1100),  # minutes 10..18.3; decomposition covers up to minute 20
        k=5,
    )
    res = fe.range_query(q)
    assert res.oids == set()
    res2 = fe.range_query(
        RangeQuery(BBox.of(12.605, 41.605, 12.615, 41.615), "Foo", "poi", interval=(600, 1150), k=5)
    )
    assert res2.oids == {"edge"}
    fe.delete("edge", "Foo", "poi", "u1", {"type": "Point", "coordinates": [12.61, 41.61]})


def test_prefilter_end_to_end(cluster):
    fe = cluster.frontend_as("Foo", "poi", "u1")
    fe.insert(feature_dict("lone", (12.71, 41.71)))
    all_void = [TileId.at(2, 12.0 + i / 100, 42.5) for i in range(40)]
    kept = fe.prefilter(all_void, "Foo", "poi")
    assert len(kept) <= 2  # only possible false positives survive
    populated = [TileId.at(2, 12.71, 41.71), TileId.at(1, 12.7, 41.7), TileId.at(0, 12, 41)]
    assert fe.prefilter(populated, "Foo", "poi") == set(populated)
    fe.delete("lone", "Foo", "poi", "u1", {"type": "Point", "coordinates": [12.71, 41.71]})


def test_prefilter_falls_back_when_service_unavailable(cluster):
    fe = cluster.frontend_as("Foo", "poi", "u1")

    class Broken:
        def membership(self, items):
            raise TimeoutError("bf down")

    old = fe.bf_client
    fe.bf_client = Broken()
    try:
        tiles = {TileId.at(2, 12.5, 41.5), TileId.at(2, 12.6, 41.6)}
        assert fe.prefilter(tiles, "Foo", "poi") == tiles
        res = fe.range_query(
            RangeQuery(BBox.of(12.505, 41.505, 12.515, 41.515), "Foo", "poi", use_bf=True, k=5)
        )
        assert res.stats.bf_fallback
    finally:
        fe.bf_client = old


def test_parallel_fanout_bounded(cluster):
    fe = cluster.frontend_as("Foo", "poi", "u1")
    in_flight = {"now": 0, "max": 0}
    lock = threading.Lock()
    real_get = fe.consumer.get

    def counting_get(*args, **kw):
        with lock:
            in_flight["now"] += 1
            in_flight["max"] = max(in_flight["max"], in_flight["now"])
        try:
            return real_get(*args, **kw)
        finally:
            with lock:
                in_flight["now"] -= 1

    fe.consumer.get = counting_get
    try:
        q = RangeQuery(BBox.of(12.0, 41.0, 12.9, 41.9), "Foo", "poi", k=40, parallelism=3)
        fe.range_query(q)
    finally:
        fe.consumer.get = real_get
    assert 0 < in_flight["max"] <= 3


# ---------------------------------------------------------------------------
# randomized oracle equivalence (small-scale version of the acceptance run)


def _oracle(features, q: RangeQuery):
    """Linear scan, written independently of the query path."""
    out = set()
    for f in features:
        geom = f["geometry"]
        props = f["properties"]
        if props["tid"] != q.tid or props["cid"] != q.cid:
            continue
        lo_lng, lo_lat = q.bbox.min.lng, q.bbox.min.lat
        hi_lng, hi_lat = q.bbox.max.lng, q.bbox.max.lat
        if geom["type"] == "Point":
            pts = [geom["coordinates"]]
        else:
            pts = geom["coordinates"]
        inside = [lo_lng <= x <= hi_lng and lo_lat <= y <= hi_lat for x, y in pts]
        if q.mode == "include":
            if not all(inside):
                continue
        elif not any(inside):
            continue
        if q.interval is not None and "temporalExtent" in f:
            a, b = f["temporalExtent"]["validTime"]["value"]
            if not (a <= q.interval[1] and b >= q.interval[0]):
                continue
        out.add(props["oid"])
    return out


def test_range_query_matches_linear_scan_oracle():
    cluster = Cluster(make_spec())
    try:
        rng = random.Random(2024)
        fe = cluster.frontend_as("Foo", "poi", "u1")
        features = []
        for i in range(250):
            if rng.random() < 0.3:
                pts = [
                    (rng.uniform(12.0, 13.99), rng.uniform(41.0, 42.99))
                    for _ in range(rng.randrange(2, 5))
                ]
                obj = feature_dict(f"mp{i}", pts, multi=True)
            else:
                obj = feature_dict(f"p{i}", (rng.uniform(12.0, 13.99), rng.uniform(41.0, 42.99)))
            if rng.random() < 0.5:
                a = rng.randrange(0, 100_000)
                obj["temporalExtent"] = {
                    "validTime": {"type": "interval", "value": [a, a + rng.randrange(0, 50_000)]}
                }
            report = fe.insert(obj)
            assert report.ok
            features.append(obj)

        for i in range(60):
            cx = rng.uniform(12.0, 13.9)
            cy = rng.uniform(41.0, 42.9)
            w = rng.uniform(0.01, 0.8)
            q = RangeQuery(
                bbox=BBox.of(cx, cy, min(cx + w, 13.999), min(cy + w, 42.999)),
                tid="Foo",
                cid="poi",
                mode=rng.choice(("intersect", "include")),
                interval=(20_000, 70_000) if rng.random() < 0.5 else None,
                k=rng.choice((5, 50)),
                use_bf=rng.random() < 0.5,
            )
            got = fe.range_query(q).oids
            expect = _oracle(features, q)
            assert got == expect, f"query {i}: {got ^ expect}"
    finally:
        cluster.close()


def test_k_never_changes_results():
    cluster = Cluster(make_spec())
    try:
        rng = random.Random(7)
        fe = cluster.frontend_as("Foo", "poi", "u1")
        for i in range(80):
            fe.insert(feature_dict(f"o{i}", (rng.uniform(12, 13.99), rng.uniform(41, 42.99))))
        for _ in range(10):
            cx, cy = rng.uniform(12, 13.5), rng.uniform(41, 42.5)
            box = BBox.of(cx, cy, cx + 0.4, cy + 0.4)
            results = {
                k: fe.range_query(RangeQuery(box, "Foo", "poi", k=k)).oids for k in (5, 50, 500)
            }
            assert results[5] == results[50] == results[500]
    finally:
        cluster.close()


# ---------------------------------------------------------------------------
# generic OR-condition decomposition


def test_split_or_conditions():
    names = split_or_conditions("ab", "surname", ["Detti", "Blefari"], lambda v: v[0].lower())
    assert [str(n) for n in names] == [
        "ndn:/d/ab/surname=Detti",
        "ndn:/b/ab/surname=Blefari",
    ]


# ---------------------------------------------------------------------------
# service endpoint and config files


def test_service_endpoint_roundtrip():
    cluster = Cluster(make_spec(service_port=0))
    try:
        svc = cluster.services["fe1"]
        client = ServiceClient(*svc.address)
        ins = client.call({"op": "insert", "feature": feature_dict("svc1", (12.52, 41.52))})
        assert ins["ok"], ins
        res = client.call(
            {
                "op": "range_query",
                "bbox": [12.5, 41.5, 12.6, 41.6],
                "tid": "Foo",
                "cid": "poi",
                "k": 10,
            }
        )
        assert res["ok"]
        assert [f["properties"]["oid"] for f in res["objects"]] == ["svc1"]
        dele = client.call(
            {
                "op": "delete",
                "oid": "svc1",
                "tid": "Foo",
                "cid": "poi",
                "uid": "u1",
                "geometry": {"type": "Point", "coordinates": [12.52, 41.52]},
            }
        )
        assert dele["ok"]
        bad = client.call({"op": "nonsense"})
        assert not bad["ok"]
        client.close()
    finally:
        cluster.close()


def test_parse_cluster_config(tmp_path):
    cfg = tmp_path / "cluster.ini"
    cfg.write_text(
        """
[cluster]
scheme = hmac
bf_enabled = true
bf_capacity = 500
qdata_freshness_ms = 1000
rate_limit_mbps = 200
frontends = fe1, fe2

[cost]
enabled = true
c1_ms = 3.0
p_db = 0.85

[engine.e1]
tiles = 12/41, 13/41

[engine.e2]
tiles = 12/42

[tenant.Foo]
collections = poi

[user.u1]
tid = Foo
cid = poi
permission = rw

[routes]
ndn:/OGB/13/41 = e1
"""
    )
    spec = parse_cluster_config(str(cfg))
    assert spec.scheme == SCHEME_HMAC
    assert spec.engines["e1"] == [TileId.at(0, 12, 41), TileId.at(0, 13, 41)]
    assert spec.rate_limit_bps == 200e6
    assert spec.cost is not None and spec.cost.p_db == 0.85
    assert spec.frontends == ["fe1", "fe2"]
    assert spec.routes == [(Name.parse("/OGB/13/41"), "e1")]
    cluster = Cluster(spec)
    try:
        fe = cluster.frontend_as("Foo", "poi", "u1")
        rep = fe.insert(feature_dict("cfg1", (12.9, 41.9)))
        assert rep.ok
    finally:
        cluster.close()

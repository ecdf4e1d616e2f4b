"""Geo-sharded spatial-temporal object store over a name-based forwarding fabric."""

from geoshard.geogrid import (
    BBox,
    Feature,
    GeoCoord,
    Geometry,
    TileId,
    children,
    intersecting_tiles,
    parent,
    parse_feature,
    parse_tile_prefix,
    tile_bbox,
    tile_of,
    tile_prefix,
)
from geoshard.icn.names import Name
from geoshard.tessellate import (
    PeriodSet,
    Tessellation,
    brute_force_optimal,
    constrained_tessellation,
    min_stretch,
    stretch,
    temporal_decompose,
    tile_stretch,
)

__all__ = [
    "BBox",
    "Feature",
    "GeoCoord",
    "Geometry",
    "Name",
    "PeriodSet",
    "Tessellation",
    "TileId",
    "brute_force_optimal",
    "children",
    "constrained_tessellation",
    "intersecting_tiles",
    "min_stretch",
    "parent",
    "parse_feature",
    "parse_tile_prefix",
    "stretch",
    "temporal_decompose",
    "tile_bbox",
    "tile_of",
    "tile_prefix",
    "tile_stretch",
]

"""Minimal information-centric networking layer.

Hierarchical names, Interest/Data packets with a length-prefixed binary TLV
encoding, forwarders (FIB longest-prefix match, PIT aggregation/multicast,
freshness-bounded content store), in-process and TCP faces, and blocking
consumer/producer endpoints with content segmentation.
"""

from geoshard.icn.clock import ManualClock, system_clock
from geoshard.icn.consumer import Consumer, GetTimeoutError
from geoshard.icn.fabric import Fabric
from geoshard.icn.faces import Face, TcpFace, TcpFaceServer, TokenBucket, face_pair, tcp_connect
from geoshard.icn.forwarder import Forwarder, ForwarderStats, load_static_routes, longest_prefix_match
from geoshard.icn.names import Name
from geoshard.icn.packets import (
    DataPacket,
    InterestPacket,
    WireFormatError,
    decode_packet,
    encode_packet,
    reassemble,
    segment,
    segment_name,
    split_segment_name,
)
from geoshard.icn.producer import Producer, ProducerReply

__all__ = [
    "Consumer",
    "DataPacket",
    "Fabric",
    "Face",
    "Forwarder",
    "ForwarderStats",
    "GetTimeoutError",
    "InterestPacket",
    "ManualClock",
    "Name",
    "Producer",
    "ProducerReply",
    "TcpFace",
    "TcpFaceServer",
    "TokenBucket",
    "WireFormatError",
    "decode_packet",
    "encode_packet",
    "face_pair",
    "load_static_routes",
    "longest_prefix_match",
    "reassemble",
    "segment",
    "segment_name",
    "split_segment_name",
    "system_clock",
    "tcp_connect",
]

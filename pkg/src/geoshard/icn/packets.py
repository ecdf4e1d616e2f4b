"""Interest/Data packets, the wire TLV codec, and content segmentation.

Wire layout (all integers big-endian):

  packet   := type:u8 body                  types: 0x01 Interest, 0x02 Data
  name     := count:u16 (len:u16 bytes)*    components are UTF-8
  Interest := name nonce:u32 lifetime_ms:u32 flags:u8
              [params_len:u32 params]                 (flag 0x02)
              [key_locator:name scheme:u8 sig_len:u16 sig]   (flag 0x01)
  Data     := name freshness_ms:u32 flags:u8
              [segment:u32 final_segment:u32]                (flag 0x02)
              [key_locator:name scheme:u8 sig_len:u16 sig]   (flag 0x01)
              payload_len:u32 payload

Signatures cover the name, application parameters and key locator for
Interests (so retransmissions with fresh nonces stay valid), and the name,
freshness, segment fields, key locator and payload for Data.
"""

from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

from geoshard.icn.names import Name

TYPE_INTEREST = 0x01
TYPE_DATA = 0x02

_FLAG_SIGNED = 0x01
_FLAG_EXTRA = 0x02

DEFAULT_LIFETIME_MS = 4000
DEFAULT_MAX_PAYLOAD = 8192

_SEG_PREFIX = "seg="


class WireFormatError(ValueError):
    """Malformed packet bytes."""


def _new_nonce() -> int:
    return random.getrandbits(32)


@dataclass(frozen=True, slots=True)
class InterestPacket:
    name: Name
    nonce: int = field(default_factory=_new_nonce)
    lifetime_ms: int = DEFAULT_LIFETIME_MS
    app_params: bytes | None = None
    key_locator: Name | None = None
    sig_scheme: int = 0
    signature: bytes | None = None

    def with_new_nonce(self) -> "InterestPacket":
        return replace(self, nonce=_new_nonce())


@dataclass(frozen=True, slots=True)
class DataPacket:
    name: Name
    payload: bytes = b""
    freshness_ms: int = 0
    key_locator: Name | None = None
    sig_scheme: int = 0
    signature: bytes | None = None
    segment: int | None = None
    final_segment: int | None = None


Packet = InterestPacket | DataPacket


# --- encoding ---------------------------------------------------------------


def _encode_name(name: Name) -> bytes:
    parts = [struct.pack("!H", len(name))]
    for comp in name:
        raw = comp.encode()
        parts.append(struct.pack("!H", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def _encode_sig(key_locator: Name, scheme: int, sig: bytes) -> bytes:
    return _encode_name(key_locator) + struct.pack("!BH", scheme, len(sig)) + sig


def encode_packet(pkt: Packet) -> bytes:
    if isinstance(pkt, InterestPacket):
        flags = (_FLAG_SIGNED if pkt.signature is not None else 0) | (
            _FLAG_EXTRA if pkt.app_params is not None else 0
        )
        out = [bytes([TYPE_INTEREST]), _encode_name(pkt.name)]
        out.append(struct.pack("!IIB", pkt.nonce & 0xFFFFFFFF, pkt.lifetime_ms, flags))
        if pkt.app_params is not None:
            out.append(struct.pack("!I", len(pkt.app_params)))
            out.append(pkt.app_params)
        if pkt.signature is not None:
            out.append(_encode_sig(pkt.key_locator or Name(), pkt.sig_scheme, pkt.signature))
        return b"".join(out)
    if isinstance(pkt, DataPacket):
        flags = (_FLAG_SIGNED if pkt.signature is not None else 0) | (
            _FLAG_EXTRA if pkt.segment is not None else 0
        )
        out = [bytes([TYPE_DATA]), _encode_name(pkt.name)]
        out.append(struct.pack("!IB", pkt.freshness_ms, flags))
        if pkt.segment is not None:
            out.append(struct.pack("!II", pkt.segment, pkt.final_segment or 0))
        if pkt.signature is not None:
            out.append(_encode_sig(pkt.key_locator or Name(), pkt.sig_scheme, pkt.signature))
        out.append(struct.pack("!I", len(pkt.payload)))
        out.append(pkt.payload)
        return b"".join(out)
    raise TypeError(f"not a packet: {pkt!r}")


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WireFormatError("truncated packet")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("!H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("!I", self.take(4))[0]

    def name(self) -> Name:
        count = self.u16()
        comps = []
        for _ in range(count):
            comps.append(self.take(self.u16()).decode())
        return Name(comps)


def decode_packet(raw: bytes) -> Packet:
    r = _Reader(raw)
    ptype = r.u8()
    try:
        if ptype == TYPE_INTEREST:
            name = r.name()
            nonce, lifetime, flags = r.u32(), r.u32(), r.u8()
            params = r.take(r.u32()) if flags & _FLAG_EXTRA else None
            kl, scheme, sig = None, 0, None
            if flags & _FLAG_SIGNED:
                kl = r.name() or None
                scheme = r.u8()
                sig = r.take(r.u16())
            pkt: Packet = InterestPacket(name, nonce, lifetime, params, kl, scheme, sig)
        elif ptype == TYPE_DATA:
            name = r.name()
            freshness, flags = r.u32(), r.u8()
            segment = final = None
            if flags & _FLAG_EXTRA:
                segment, final = r.u32(), r.u32()
            kl, scheme, sig = None, 0, None
            if flags & _FLAG_SIGNED:
                kl = r.name() or None
                scheme = r.u8()
                sig = r.take(r.u16())
            payload = r.take(r.u32())
            pkt = DataPacket(name, payload, freshness, kl, scheme, sig, segment, final)
        else:
            raise WireFormatError(f"unknown packet type 0x{ptype:02x}")
    except ValueError as exc:
        raise WireFormatError(str(exc)) from None
    if r.pos != len(raw):
        raise WireFormatError("trailing bytes after packet")
    return pkt


def encode_packet_stream(packets: Iterable[Packet]) -> bytes:
    """Concatenation of length-prefixed packets (tile containers, bulk pushes)."""
    out = []
    for pkt in packets:
        raw = encode_packet(pkt)
        out.append(struct.pack("!I", len(raw)))
        out.append(raw)
    return b"".join(out)


def decode_packet_stream(raw: bytes) -> list[Packet]:
    out = []
    pos = 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise WireFormatError("truncated stream header")
        (length,) = struct.unpack_from("!I", raw, pos)
        pos += 4
        if pos + length > len(raw):
            raise WireFormatError("truncated stream item")
        out.append(decode_packet(raw[pos : pos + length]))
        pos += length
    return out


# --- signing input ----------------------------------------------------------


def interest_signing_bytes(pkt: InterestPacket) -> bytes:
    kl = _encode_name(pkt.key_locator or Name())
    params = pkt.app_params or b""
    return b"I" + _encode_name(pkt.name) + struct.pack("!I", len(params)) + params + kl


def data_signing_bytes(pkt: DataPacket) -> bytes:
    kl = _encode_name(pkt.key_locator or Name())
    seg = struct.pack("!II", pkt.segment or 0, pkt.final_segment or 0)
    return (
        b"D"
        + _encode_name(pkt.name)
        + struct.pack("!I", pkt.freshness_ms)
        + seg
        + kl
        + pkt.payload
    )


# --- segmentation -----------------------------------------------------------


def segment_name(base: Name, index: int) -> Name:
    return base / f"{_SEG_PREFIX}{index}"


def split_segment_name(name: Name) -> tuple[Name, int | None]:
    """(base name, segment index); index is None for unsegmented names."""
    if len(name) and name[-1].startswith(_SEG_PREFIX):
        try:
            return name[:-1], int(name[-1][len(_SEG_PREFIX):])
        except ValueError:
            pass
    return name, None


def segment(
    name: Name,
    payload: bytes,
    max_payload: int = DEFAULT_MAX_PAYLOAD,
    freshness_ms: int = 0,
    sign: Callable[[DataPacket], DataPacket] | None = None,
) -> list[DataPacket]:
    """Split a payload into ceil(len/max_payload) Data packets (at least one)."""
    if max_payload < 1:
        raise ValueError("max_payload must be >= 1")
    count = max(1, math.ceil(len(payload) / max_payload))
    packets = []
    for i in range(count):
        chunk = payload[i * max_payload : (i + 1) * max_payload]
        pkt = DataPacket(
            name=segment_name(name, i),
            payload=chunk,
            freshness_ms=freshness_ms,
            segment=i,
            final_segment=count - 1,
        )
        packets.append(sign(pkt) if sign else pkt)
    return packets


def reassemble(packets: Iterable[DataPacket]) -> bytes:
    """Inverse of :func:`segment`; validates indices and the final marker."""
    pkts = sorted(packets, key=lambda p: p.segment or 0)
    if not pkts:
        raise ValueError("no segments")
    final = pkts[-1].final_segment
    if final is None or [p.segment for p in pkts] != list(range(final + 1)):
        raise ValueError("segment set is not contiguous")
    return b"".join(p.payload for p in pkts)

"""SRA-CP wire messages and communication policies.

All integers are little-endian.  Boolean masks travel as run-length codes:
one byte holding the value of the first run, then each run length as an
unsigned LEB128 varint, alternating values.  Runs cover the mask in
row-major order and must sum to ``H * W``.

Beacon (20-byte header, then RLE blind mask)::

    sender u32 | frame u32 | x f32 | y f32 | vx u16 | vy u16

Request (32-byte header, then RLE blind mask, RLE risky mask, one u8 risk
per risky cell in row-major order)::

    requester u32 | target u32 | frame u32 | x f32 | y f32 |
    vx u16 | vy u16 | grid hash u64

Response (8-byte envelope, then a feature payload, see ``selection``)::

    responder u32 | requester u32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ProtocolError, ValidationError
from .selection import GateMode

__all__ = [
    "rle_encode",
    "rle_decode",
    "CoverageBeacon",
    "CPRequest",
    "CPResponse",
    "SRACP",
    "UpperBound",
    "LowerBound",
    "FixedNeighborEqual",
    "RandomCell",
    "CommPolicy",
    "parse_policy",
    "beacon_bytes",
    "quantize_velocity",
    "dequantize_velocity",
]

_BEACON = struct.Struct("<IIffHH")
_REQUEST = struct.Struct("<IIIffHHQ")
_RESPONSE = struct.Struct("<II")

BEACON_HEADER_SIZE = _BEACON.size
REQUEST_HEADER_SIZE = _REQUEST.size
RESPONSE_ENVELOPE_SIZE = _RESPONSE.size

_V_OFFSET = 64.0
_V_SCALE = 512.0


def quantize_velocity(v: float) -> int:
    return int(np.clip(round((v + _V_OFFSET) * _V_SCALE), 0, 0xFFFF))


def dequantize_velocity(q: int) -> float:
    return q / _V_SCALE - _V_OFFSET


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def rle_encode(mask) -> bytes:
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return b""
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    runs = np.diff(bounds)
    return bytes([int(flat[0])]) + b"".join(_varint(int(r)) for r in runs)


def rle_decode(data: bytes, shape: tuple[int, int], offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one RLE mask starting at ``offset``; returns (mask, next offset)."""
    total = shape[0] * shape[1]
    if total == 0:
        return np.zeros(shape, bool), offset
    if offset >= len(data) or data[offset] > 1:
        raise ProtocolError("bad RLE start byte")
    value = bool(data[offset])
    pos = offset + 1
    runs = []
    covered = 0
    while covered < total:
        n, shift = 0, 0
        while True:
            if pos >= len(data):
                raise ProtocolError("truncated RLE stream")
            b = data[pos]
            pos += 1
            n |= (b & 0x7F) << shift
            shift += 7
            if not b & 0x80:
                break
        if n == 0:
            raise ProtocolError("zero-length RLE run")
        runs.append(n)
        covered += n
    if covered != total:
        raise ProtocolError(f"RLE runs cover {covered} cells, expected {total}")
    vals = np.zeros(len(runs), bool)
    vals[0::2] = value
    vals[1::2] = not value
    return np.repeat(vals, runs).reshape(shape), pos


@dataclass(frozen=True)
class CoverageBeacon:
    sender: int
    frame: int
    position: tuple[float, float]
    velocity: tuple[float, float]
    blind: np.ndarray  # (H, W) bool; coverage is the complement

    def encode(self) -> bytes:
        head = _BEACON.pack(self.sender, self.frame, *self.position,
                            quantize_velocity(self.velocity[0]), quantize_velocity(self.velocity[1]))
        return head + rle_encode(self.blind)

    @classmethod
    def decode(cls, data: bytes, shape: tuple[int, int]) -> "CoverageBeacon":
        if len(data) < BEACON_HEADER_SIZE:
            raise ProtocolError("beacon shorter than header")
        s, f, x, y, qx, qy = _BEACON.unpack_from(data, 0)
        blind, end = rle_decode(data, shape, BEACON_HEADER_SIZE)
        if end != len(data):
            raise ProtocolError("trailing bytes after beacon mask")
        return cls(s, f, (x, y), (dequantize_velocity(qx), dequantize_velocity(qy)), blind)

    @property
    def coverage(self) -> np.ndarray:
        return ~self.blind


def beacon_bytes(beacon: CoverageBeacon) -> int:
    return BEACON_HEADER_SIZE + len(rle_encode(beacon.blind))


@dataclass(frozen=True)
class CPRequest:
    requester: int
    target: int
    frame: int
    position: tuple[float, float]
    velocity: tuple[float, float]
    grid_hash: int
    blind: np.ndarray  # (H, W) bool, stabilized blind zone
    risky: np.ndarray  # (H, W) bool, risky subset of the blind zone
    risk: np.ndarray  # (H, W) float in [0, 1]; only risky cells travel

    def __post_init__(self):
        if self.target == self.requester:
            raise ValidationError("request target must differ from requester")
        if not np.any(self.blind):
            raise ValidationError("request needs a non-empty blind zone")

    def encode(self) -> bytes:
        head = _REQUEST.pack(self.requester, self.target, self.frame, *self.position,
                             quantize_velocity(self.velocity[0]), quantize_velocity(self.velocity[1]),
                             self.grid_hash)
        risky = self.risky & self.blind
        q = np.rint(255.0 * np.clip(self.risk[risky], 0.0, 1.0)).astype(np.uint8)
        return head + rle_encode(self.blind) + rle_encode(risky) + q.tobytes()

    @classmethod
    def decode(cls, data: bytes, shape: tuple[int, int], expected_grid_hash=None) -> "CPRequest":
        if len(data) < REQUEST_HEADER_SIZE:
            raise ProtocolError("request shorter than header")
        req, tgt, frame, x, y, qx, qy, ghash = _REQUEST.unpack_from(data, 0)
        if expected_grid_hash is not None and ghash != expected_grid_hash:
            raise ProtocolError("request grid hash mismatch")
        blind, pos = rle_decode(data, shape, REQUEST_HEADER_SIZE)
        risky, pos = rle_decode(data, shape, pos)
        n = int(risky.sum())
        if len(data) != pos + n:
            raise ProtocolError(f"request carries {len(data) - pos} risk bytes, expected {n}")
        risk = np.zeros(shape)
        risk[risky] = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos) / 255.0
        return cls(req, tgt, frame, (x, y), (dequantize_velocity(qx), dequantize_velocity(qy)),
                   ghash, blind, risky, risk)


@dataclass(frozen=True)
class CPResponse:
    responder: int
    requester: int
    payload: bytes

    def encode(self) -> bytes:
        return _RESPONSE.pack(self.responder, self.requester) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "CPResponse":
        if len(data) < RESPONSE_ENVELOPE_SIZE:
            raise ProtocolError("response shorter than envelope")
        r, q = _RESPONSE.unpack_from(data, 0)
        return cls(r, q, bytes(data[RESPONSE_ENVELOPE_SIZE:]))


# ---------------------------------------------------------------------------
# communication policies


@dataclass(frozen=True)
class SRACP:
    gate: GateMode = GateMode.UNION
    alpha: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "gate", GateMode.parse(self.gate))
        if not 0 <= self.alpha <= 1:
            raise ValidationError("alpha must lie in [0, 1]")

    @property
    def name(self) -> str:
        base = {GateMode.UNION: "SRACP", GateMode.SPATIAL_ONLY: "SRACP-S", GateMode.RISK_ONLY: "SRACP-R"}[self.gate]
        return base if self.alpha == 0.5 else f"{base}-a{self.alpha:g}"


@dataclass(frozen=True)
class UpperBound:
    name: str = "UpperBound"


@dataclass(frozen=True)
class LowerBound:
    name: str = "LowerBound"


@dataclass(frozen=True)
class FixedNeighborEqual:
    name: str = "FixedNeighborEqual"


@dataclass(frozen=True)
class RandomCell:
    seed: int = 0

    @property
    def name(self) -> str:
        return "RandomCell"


CommPolicy = Union[SRACP, UpperBound, LowerBound, FixedNeighborEqual, RandomCell]


def parse_policy(text: str, gate="union", alpha: float = 0.5, seed: int = 0) -> CommPolicy:
    key = text.strip().lower().replace("_", "").replace("-", "")
    if key in ("sracp", "ours"):
        return SRACP(GateMode.parse(gate), alpha)
    if key in ("sracps", "sonly"):
        return SRACP(GateMode.SPATIAL_ONLY, alpha)
    if key in ("sracpr", "ronly"):
        return SRACP(GateMode.RISK_ONLY, alpha)
    if key == "upperbound":
        return UpperBound()
    if key == "lowerbound":
        return LowerBound()
    if key in ("fixedneighborequal", "fixedneighbor"):
        return FixedNeighborEqual()
    if key in ("randomcell", "random"):
        return RandomCell(seed)
    raise ValidationError(f"unknown policy {text!r}")

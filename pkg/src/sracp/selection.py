"""Budgeted cell selection and the feature payload codec.

Byte accounting follows a fixed per-message header plus a fixed per-cell
cost ``b_cell = b_idx + C * b_feat``.  The wire layout of a payload is
little-endian::

    offset  size  field
    0       4     sender id (u32)
    4       4     frame id (u32)
    8       8     grid hash (u64)
    16      4     cell count (u32)
    20      ..    zero padding up to h_hdr
    h_hdr   ..    per cell: index (u32) then C feature bytes (u8 fixed point)
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import BudgetError, ProtocolError, ValidationError
from .grid import BlindZoneMask, GridSpec

__all__ = [
    "BudgetSpec",
    "GateMode",
    "GainMap",
    "SelectionMask",
    "FeaturePayload",
    "compute_gain",
    "capacity_cells",
    "select_cells",
    "usage_bytes",
    "overuse_penalty",
    "total_objective",
    "serialize_payload",
    "serialize_cells",
    "deserialize_payload",
    "HEADER_FIELDS_SIZE",
]

_HEADER = struct.Struct("<IIQI")
HEADER_FIELDS_SIZE = _HEADER.size  # 20


@dataclass(frozen=True)
class BudgetSpec:
    B_bytes: int = 1024
    h_hdr: int = 24
    b_idx: int = 4
    b_feat: int = 1
    C: int = 64

    def __post_init__(self):
        for name in ("B_bytes", "h_hdr", "b_idx", "b_feat", "C"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValidationError(f"{name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.C < 1:
            raise ValidationError("C must be >= 1")

    @property
    def b_cell(self) -> int:
        return self.b_idx + self.C * self.b_feat

    def with_bytes(self, B_bytes: int) -> "BudgetSpec":
        return BudgetSpec(int(B_bytes), self.h_hdr, self.b_idx, self.b_feat, self.C)


class GateMode(enum.Enum):
    SPATIAL_ONLY = "s"
    RISK_ONLY = "r"
    UNION = "union"

    @classmethod
    def parse(cls, text: Union[str, "GateMode"]) -> "GateMode":
        if isinstance(text, GateMode):
            return text
        key = str(text).strip().lower()
        aliases = {"s": cls.SPATIAL_ONLY, "s-only": cls.SPATIAL_ONLY, "spatial": cls.SPATIAL_ONLY,
                   "r": cls.RISK_ONLY, "r-only": cls.RISK_ONLY, "risk": cls.RISK_ONLY,
                   "union": cls.UNION, "u": cls.UNION}
        if key not in aliases:
            raise ValidationError(f"unknown gate mode {text!r}; expected s, r or union")
        return aliases[key]


@dataclass(frozen=True)
class GainMap:
    grid: GridSpec
    g_sp: np.ndarray
    g_risk: np.ndarray
    blind: np.ndarray
    alpha: float
    g: np.ndarray


@dataclass(frozen=True)
class SelectionMask:
    grid: GridSpec
    S: np.ndarray
    R: np.ndarray
    selected: np.ndarray  # sorted flat indices

    @property
    def union(self) -> np.ndarray:
        return self.S | self.R

    @classmethod
    def from_indices(cls, grid: GridSpec, indices, spatial=True, risk=True) -> "SelectionMask":
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        m = np.zeros(grid.n_cells, bool)
        m[idx] = True
        m = m.reshape(grid.shape)
        empty = np.zeros(grid.shape, bool)
        return cls(grid, m if spatial else empty, m if risk else empty, idx)

    @classmethod
    def empty(cls, grid: GridSpec) -> "SelectionMask":
        return cls.from_indices(grid, [])


def compute_gain(g_sp, g_risk, blind, alpha: float) -> GainMap:
    """Per-cell transmit priority mixing saliency, risk and blind-zone membership."""
    if isinstance(blind, BlindZoneMask):
        grid, O = blind.grid, blind.occluded
    else:
        raise ValidationError("blind must be a BlindZoneMask")
    g_sp = np.asarray(g_sp, dtype=float)
    g_risk = np.asarray(g_risk, dtype=float)
    if g_sp.shape != grid.shape or g_risk.shape != grid.shape:
        raise ValidationError(f"gain inputs {g_sp.shape}/{g_risk.shape} do not match grid {grid.shape}")
    if not 0 <= alpha <= 1:
        raise ValidationError("alpha must lie in [0, 1]")
    Of = O.astype(float)
    g = alpha * g_sp * g_risk + (1.0 - alpha) * Of * g_risk
    return GainMap(grid, g_sp, g_risk, O.copy(), float(alpha), g)


def capacity_cells(budget: BudgetSpec) -> int:
    if budget.b_cell == 0:
        raise ValidationError("b_cell must be positive")
    return max(0, (budget.B_bytes - budget.h_hdr) // budget.b_cell)


def top_k_indices(score: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the k largest strictly positive scores.

    Ties go to the smaller row-major index.  Result is sorted ascending.
    """
    flat = np.asarray(score, dtype=float).ravel()
    pos = np.flatnonzero(flat > 0)
    if k <= 0 or len(pos) == 0:
        return np.zeros(0, dtype=np.int64)
    if len(pos) > k:
        order = np.lexsort((pos, -flat[pos]))
        pos = pos[order[:k]]
    return np.sort(pos)


def select_cells(gain: GainMap, k: int, gate: GateMode) -> SelectionMask:
    if k < 0:
        raise ValidationError("k must be >= 0")
    gate = GateMode.parse(gate)
    score = {GateMode.SPATIAL_ONLY: gain.g_sp, GateMode.RISK_ONLY: gain.g_risk, GateMode.UNION: gain.g}[gate]
    idx = top_k_indices(score, k)
    return SelectionMask.from_indices(
        gain.grid, idx, spatial=gate is not GateMode.RISK_ONLY, risk=gate is not GateMode.SPATIAL_ONLY
    )


def _count(m) -> int:
    if isinstance(m, SelectionMask):
        return int(len(m.selected))
    if isinstance(m, np.ndarray) and m.dtype == bool:
        return int(m.sum())
    return int(m)


def usage_bytes(masks: Sequence[Sequence], budget: BudgetSpec, batch_size: int) -> int:
    """Bytes used by a batch.

    ``masks[b]`` lists the non-ego agents' selections for sample ``b`` (ego
    excluded by the caller); each entry is a SelectionMask, a boolean mask
    or a plain cell count.
    """
    cells = sum(_count(m) for sample in masks for m in sample)
    return batch_size * budget.h_hdr + cells * budget.b_cell


def overuse_penalty(U: float, B_target: float) -> float:
    if not B_target > 0:
        raise ValidationError("B_target must be positive")
    return max(0.0, U / B_target - 1.0)


def total_objective(l_det: float, risk_mse: float, phi: float, lambda_risk: float = 1.0, lambda_comm: float = 1.0) -> float:
    return l_det + lambda_risk * risk_mse + lambda_comm * phi


@dataclass(frozen=True)
class FeaturePayload:
    sender: int
    frame: int
    grid_hash: int
    indices: np.ndarray  # uint32, strictly increasing
    features: np.ndarray  # (n, C) float, dequantized

    @property
    def n_cells(self) -> int:
        return len(self.indices)


def _check_codec(budget: BudgetSpec) -> None:
    if budget.b_idx != 4 or budget.b_feat != 1:
        raise ValidationError("payload codec requires b_idx=4 and b_feat=1")
    if budget.h_hdr < HEADER_FIELDS_SIZE:
        raise ValidationError(f"h_hdr must be >= {HEADER_FIELDS_SIZE} bytes to hold the header")


def quantize(values) -> np.ndarray:
    return np.rint(255.0 * np.clip(values, 0.0, 1.0)).astype(np.uint8)


def serialize_payload(features, mask: SelectionMask, budget: BudgetSpec, meta: tuple[int, int],
                      enforce_budget: bool = True) -> bytes:
    """Encode the selected cells of a (C, H, W) feature array.

    ``meta`` is ``(sender_id, frame_id)``.  ``enforce_budget=False`` is only
    for the unbudgeted full-sharing baseline.
    """
    values = np.asarray(getattr(features, "values", features))
    if values.shape[1:] != mask.grid.shape:
        raise ValidationError("feature field does not match selection grid")
    idx = np.asarray(mask.selected, dtype=np.int64)
    return serialize_cells(values.reshape(values.shape[0], -1)[:, idx], mask, budget, meta, enforce_budget)


def serialize_cells(vectors, mask: SelectionMask, budget: BudgetSpec, meta: tuple[int, int],
                    enforce_budget: bool = True) -> bytes:
    """Like :func:`serialize_payload` but takes only the (C, n) selected vectors."""
    _check_codec(budget)
    vectors = np.asarray(vectors, dtype=float)
    idx = np.asarray(mask.selected, dtype=np.int64)
    C = vectors.shape[0]
    if C != budget.C:
        raise ValidationError(f"feature field has {C} channels, budget expects {budget.C}")
    if vectors.shape[1] != len(idx):
        raise ValidationError("one feature vector per selected cell is required")
    if enforce_budget and len(idx) > capacity_cells(budget):
        raise BudgetError(f"{len(idx)} cells exceed capacity {capacity_cells(budget)} for {budget.B_bytes} bytes")
    sender, frame = meta
    head = _HEADER.pack(sender, frame, mask.grid.hash(), len(idx))
    head += bytes(budget.h_hdr - len(head))
    rec = np.dtype([("idx", "<u4"), ("f", "u1", (C,))])
    body = np.empty(len(idx), dtype=rec)
    body["idx"] = idx
    body["f"] = quantize(vectors.T)
    return head + body.tobytes()


def deserialize_payload(data: bytes, budget: BudgetSpec, expected_grid_hash=None) -> FeaturePayload:
    _check_codec(budget)
    if len(data) < budget.h_hdr:
        raise ProtocolError("payload shorter than header")
    sender, frame, ghash, n = _HEADER.unpack_from(data, 0)
    if expected_grid_hash is not None and ghash != expected_grid_hash:
        raise ProtocolError(f"grid hash mismatch: payload {ghash:#x}, expected {expected_grid_hash:#x}")
    if len(data) != budget.h_hdr + n * budget.b_cell:
        raise ProtocolError(f"payload length {len(data)} inconsistent with {n} cells")
    rec = np.dtype([("idx", "<u4"), ("f", "u1", (budget.C,))])
    body = np.frombuffer(data, dtype=rec, count=n, offset=budget.h_hdr)
    idx = body["idx"].astype(np.int64)
    if n > 1 and np.any(np.diff(idx) <= 0):
        raise ProtocolError("cell indices must be strictly increasing")
    return FeaturePayload(sender, frame, ghash, idx, body["f"].astype(float) / 255.0)

"""Deterministic stand-in for dual-attention fusion and the multi-task decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ProtocolError, ValidationError
from .features import OCC, RISK, FeatureField, surrogate_vectors
from .risk import RiskMap
from .selection import FeaturePayload, SelectionMask

__all__ = [
    "DetectionBox",
    "FusedCellProvenance",
    "apply_masks",
    "fuse",
    "fuse_base",
    "decode_detections",
    "connectivity_structure",
    "label_components",
    "decode_risk",
    "DEFAULT_ANCHOR",
]

DEFAULT_ANCHOR = (3.9, 1.6)


@dataclass(frozen=True)
class DetectionBox:
    center: tuple[float, float]
    length: float
    width: float
    yaw: float = 0.0
    score: float = 1.0
    risk: float = 0.0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValidationError("box length and width must be positive")

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return local @ np.array([[c, -s], [s, c]]).T + np.asarray(self.center)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "length": self.length, "width": self.width,
                "yaw": self.yaw, "score": self.score, "risk": self.risk}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionBox":
        return cls(tuple(d["center"]), d["length"], d["width"], d.get("yaw", 0.0), d.get("score", 1.0), d.get("risk", 0.0))


@dataclass(frozen=True)
class FusedCellProvenance:
    """Attention weights per agent at the cells any partner sent.

    Index 0 of ``agent_ids`` is the ego.  ``cells`` are flat indices of the
    fused cells; ``cell_weights`` and ``cell_occupancy`` are (A, len(cells))
    arrays holding each agent's attention weight and its own channel-0
    value (0 where absent).  Every other cell has weight 1 on the ego.
    """

    agent_ids: tuple[int, ...]
    shape: tuple[int, int]
    cells: np.ndarray
    cell_weights: np.ndarray
    cell_occupancy: np.ndarray

    def _dense(self, sparse: np.ndarray, ego_fill: float) -> np.ndarray:
        A = len(self.agent_ids)
        out = np.zeros((A, self.shape[0] * self.shape[1]))
        out[0] = ego_fill
        out[:, self.cells] = sparse
        return out.reshape((A,) + tuple(self.shape))

    @property
    def weights(self) -> np.ndarray:
        """Dense (A, H, W) attention weights."""
        return self._dense(self.cell_weights, 1.0)

    @property
    def occupancy(self) -> np.ndarray:
        """Dense (A, H, W) per-agent occupancy at fused cells (0 elsewhere)."""
        return self._dense(self.cell_occupancy, 0.0)

    def dominant(self) -> np.ndarray:
        """Index into ``agent_ids`` of the largest occupancy contribution per cell.

        Cells without a partner contribution report the ego (index 0).
        """
        out = np.zeros(self.shape[0] * self.shape[1], dtype=np.int64)
        if len(self.cells):
            out[self.cells] = np.argmax(self.cell_weights * self.cell_occupancy, axis=0)
        return out.reshape(self.shape)


def apply_masks(features: FeatureField, S, R) -> FeatureField:
    S = np.asarray(S, bool)
    R = np.asarray(R, bool)
    if S.shape != features.grid.shape or R.shape != features.grid.shape:
        raise ValidationError("mask shape does not match feature grid")
    return FeatureField(features.grid, features.values * (S | R))


def _gather_partners(grid, C, partners):
    """Stack partner payloads on the union of their (re-masked) cells."""
    ghash = grid.hash()
    kept = []
    for payload, mask in partners:
        if payload.grid_hash != ghash:
            raise ProtocolError(f"payload from agent {payload.sender} targets a different grid")
        if payload.features.shape[1] != C:
            raise ProtocolError("payload channel count differs from ego field")
        keep = mask.union.ravel()[payload.indices]
        kept.append((payload.sender, payload.indices[keep], payload.features[keep]))
    touched = np.unique(np.concatenate([k[1] for k in kept])) if kept else np.zeros(0, np.int64)
    A = len(kept) + 1
    vals = np.zeros((A, C, len(touched)))
    present = np.zeros((A, len(touched)), bool)
    present[0] = True
    for a, (_, idx, feats) in enumerate(kept, start=1):
        pos = np.searchsorted(touched, idx)
        vals[a][:, pos] = feats.T
        present[a, pos] = True
    return [k[0] for k in kept], touched, vals, present


def _attend(vals: np.ndarray, present: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax attention with the ego (row 0) as query; returns (output, weights)."""
    C = vals.shape[1]
    scores = np.einsum("cm,acm->am", vals[0], vals) / math.sqrt(C)
    scores = np.where(present, scores, -np.inf)
    scores = scores - scores.max(axis=0)
    w = np.where(present, np.exp(scores), 0.0)
    w /= w.sum(axis=0)
    return np.einsum("am,acm->cm", w, vals), w


def _provenance(grid, ids, touched, w, vals, present) -> FusedCellProvenance:
    occ = np.where(present, vals[:, OCC, :], 0.0) if len(touched) else np.zeros((len(ids), 0))
    if not len(touched):
        w = np.zeros((len(ids), 0))
    return FusedCellProvenance(tuple(ids), grid.shape, touched, w, occ)


def fuse(
    ego: FeatureField,
    partners: Sequence[tuple[FeaturePayload, SelectionMask]],
    ego_id: int = 0,
) -> tuple[FeatureField, FusedCellProvenance]:
    """Location-wise softmax attention of the ego query over partner cells.

    Keys and values at cell u come from the ego and from every partner whose
    payload carries u and whose re-applied mask keeps it.  Scores are scaled
    dot products with the ego feature.  Cells no partner sent are copied
    from the ego untouched.
    """
    grid = ego.grid
    C = ego.C
    senders, touched, vals, present = _gather_partners(grid, C, partners)
    flat = ego.values.reshape(C, -1)
    out = flat.copy()
    if len(touched):
        vals[0] = flat[:, touched]
        fused, w = _attend(vals, present)
        out[:, touched] = fused
    else:
        w = np.ones((1, 0))
    prov = _provenance(grid, [ego_id] + senders, touched, w, vals, present)
    return FeatureField(grid, out.reshape(ego.values.shape)), prov


def fuse_base(
    ego_base: np.ndarray,
    grid,
    partners: Sequence[tuple[FeaturePayload, SelectionMask]],
    C: int = 64,
    ego_id: int = 0,
) -> tuple[FeatureField, FusedCellProvenance]:
    """Same fusion as :func:`fuse` for an ego given as (3, H, W) base statistics.

    Full C-channel vectors are only expanded on cells a partner sent; the
    returned field carries the three base channels.
    """
    senders, touched, vals, present = _gather_partners(grid, C, partners)
    out = ego_base.reshape(3, -1).copy()
    if len(touched):
        vals[0] = surrogate_vectors(out[:, touched], C)
        fused, w = _attend(vals, present)
        out[:, touched] = fused[:3]
    else:
        w = np.ones((1, 0))
    prov = _provenance(grid, [ego_id] + senders, touched, w, vals, present)
    return FeatureField(grid, out.reshape((3,) + grid.shape)), prov


def _complete(x0, x1, y0, y1, vp, anchor):
    """Grow a partial surface box to anchor size, away from the viewpoint."""
    ext = [x1 - x0, y1 - y0]
    long_len, short_len = anchor
    a_max = int(ext[1] > ext[0])
    if ext[a_max] >= 0.5 * (long_len + short_len):
        long_axis = a_max
    else:
        long_axis = 1 - a_max
    target = [0.0, 0.0]
    target[long_axis] = long_len
    target[1 - long_axis] = short_len
    lo, hi = [x0, y0], [x1, y1]
    for ax in (0, 1):
        grow = target[ax] - ext[ax]
        if grow <= 0:
            continue
        c = 0.5 * (lo[ax] + hi[ax])
        if abs(vp[ax] - c) <= ext[ax] / 2:
            lo[ax] -= grow / 2
            hi[ax] += grow / 2
        elif vp[ax] < c:
            hi[ax] += grow
        else:
            lo[ax] -= grow
    return lo[0], hi[0], lo[1], hi[1]


def connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValidationError("connectivity must be 4 or 8")


def _gap_labels(mask: np.ndarray, structure: np.ndarray, gap: int) -> tuple[np.ndarray, int]:
    if gap == 0:
        return ndimage.label(mask, structure=structure)
    grown = ndimage.binary_dilation(mask, structure=ndimage.generate_binary_structure(2, 2), iterations=gap)
    labels, n = ndimage.label(grown, structure=structure)
    return np.where(mask, labels, 0), n


def _undo_oversized(bridged: np.ndarray, base: np.ndarray, n_base: int,
                    max_extent: tuple[float, float]) -> np.ndarray:
    long_max, short_max = max(max_extent), min(max_extent)
    out = bridged.copy()
    for k, box in enumerate(ndimage.find_objects(bridged), start=1):
        if box is None:
            continue
        span = sorted((box[0].stop - box[0].start, box[1].stop - box[1].start))
        if span[1] <= long_max and span[0] <= short_max:
            continue
        sel = bridged[box] == k
        # offset keeps reverted labels disjoint from the bridged ones
        out[box][sel] = base[box][sel] + bridged.max() + n_base
    return out


def label_components(occ: np.ndarray, threshold: float, connectivity: int = 4, merge_gap: int = 0,
                     sources: Optional[np.ndarray] = None, source_gap: Optional[int] = None,
                     max_extent: Optional[tuple[float, float]] = None):
    """Label cells above ``threshold`` into connected components.

    With ``merge_gap > 0`` components whose cells lie within ``merge_gap``
    cells of each other share a label; only above-threshold cells are
    labelled either way.  ``source_gap`` is a wider gap applied only
    between cells observed by the same sensor: one scanner leaves regular
    holes along surfaces it sees at a grazing angle, while cells from two
    different observers that are far apart usually belong to different
    objects.  ``sources`` gives the observer per cell; when omitted every
    cell counts as one source.  ``max_extent=(long, short)`` in cells caps
    what a same-source bridge may produce: a bridged component whose
    bounding box exceeds it is split back into its unbridged parts, which
    keeps two nearby objects seen by one sensor from fusing into one.
    Labels are numbered by first appearance in row-major order.  Returns
    ``(labels, n)`` like ``ndimage.label``.
    """
    if merge_gap < 0 or (source_gap is not None and source_gap < 0):
        raise ValidationError("merge_gap and source_gap must be >= 0")
    structure = connectivity_structure(connectivity)
    mask = occ > threshold
    labels, n = _gap_labels(mask, structure, merge_gap)
    if source_gap is not None and source_gap > merge_gap and n > 1:
        src = np.zeros(mask.shape, dtype=np.int64) if sources is None else np.asarray(sources)
        if src.shape != mask.shape:
            raise ValidationError("sources must match the occupancy shape")
        rows, cols, offset = [], [], n + 1
        for s_id in np.unique(src[mask]):
            sub, k = _gap_labels(mask & (src == s_id), structure, source_gap)
            hit = sub > 0
            rows.append(labels[hit])
            cols.append(sub[hit] + offset)
            offset += k + 1
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        graph = coo_matrix((np.ones(len(r)), (r, c)), shape=(offset, offset))
        _, comp = connected_components(graph, directed=False)
        bridged = np.where(mask, comp[labels] + 1, 0)
        if max_extent is not None:
            bridged = _undo_oversized(bridged, labels, n, max_extent)
        labels = bridged
    # relabel densely by first appearance of a labelled cell
    flat = labels.ravel()
    cells = np.flatnonzero(flat)
    if not len(cells):
        return np.zeros_like(labels), 0
    used, first = np.unique(flat[cells], return_index=True)
    order = used[np.argsort(first, kind="stable")]
    remap = np.zeros(int(flat.max()) + 1, dtype=labels.dtype)
    remap[order] = np.arange(1, len(order) + 1)
    return remap[labels], len(order)


def decode_detections(
    fused: FeatureField,
    occupancy_threshold: float = 0.3,
    min_cells: int = 2,
    anchor: Optional[tuple[float, float]] = None,
    viewpoints: Optional[np.ndarray] = None,
    connectivity: int = 4,
    merge_gap: int = 0,
    sources: Optional[np.ndarray] = None,
    source_gap: Optional[int] = None,
    fit_centers: bool = False,
    evidence_cells: Optional[float] = None,
    bridge_extent: Optional[tuple[float, float]] = None,
) -> list[DetectionBox]:
    """Connected-component boxes over thresholded occupancy.

    Each 4-connected component of at least ``min_cells`` cells becomes an
    axis-aligned box tightly bounding it.  With ``anchor=(length, width)``
    the box is additionally grown to the anchor footprint, extending away
    from the sensor that observed the surface (``viewpoints`` is an
    (H, W, 2) map of observer positions in the grid frame; the origin when
    omitted).  ``connectivity=8`` also joins diagonal neighbours and
    ``merge_gap`` joins fragments separated by up to that many cells;
    ``sources``/``source_gap`` are passed to :func:`label_components`,
    with ``bridge_extent`` (metres) as its ``max_extent``.
    ``fit_centers`` spans the box between the outermost cell centres
    instead of the outer cell edges.  A surface return may fall anywhere in
    its cell, so edge bounds overstate the extent by one cell on average.
    The score is the mean occupancy of the component; with
    ``evidence_cells=n0`` it is further scaled by ``1 - exp(-cells / n0)``
    so that boxes resting on a handful of cells rank below well-supported
    ones.
    """
    if not 0 < occupancy_threshold < 1:
        raise ValidationError("occupancy_threshold must lie in (0, 1)")
    grid = fused.grid
    occ = fused.values[OCC]
    risk = fused.values[RISK]
    max_extent = None if bridge_extent is None else tuple(e / grid.cell_size for e in bridge_extent)
    labels, n = label_components(occ, occupancy_threshold, connectivity, merge_gap, sources, source_gap,
                                 max_extent)
    if n == 0:
        return []
    cs = grid.cell_size
    boxes = []
    slices = ndimage.find_objects(labels)
    for lab, sl in enumerate(slices, start=1):
        comp = labels[sl] == lab
        size = int(comp.sum())
        if size < min_cells:
            continue
        rows, cols = np.nonzero(comp)
        i0, i1 = rows.min() + sl[0].start, rows.max() + sl[0].start
        j0, j1 = cols.min() + sl[1].start, cols.max() + sl[1].start
        inset = 0.5 * cs if fit_centers else 0.0
        x0, x1 = grid.x_min + j0 * cs + inset, grid.x_min + (j1 + 1) * cs - inset
        y0, y1 = grid.y_min + i0 * cs + inset, grid.y_min + (i1 + 1) * cs - inset
        o = occ[sl][comp]
        support = 1.0 if evidence_cells is None else -math.expm1(-size / evidence_cells)
        if anchor is None and fit_centers:
            # a single row or column of centres has no extent; keep one cell
            x0, x1 = min(x0, 0.5 * (x0 + x1 - cs)), max(x1, 0.5 * (x0 + x1 + cs))
            y0, y1 = min(y0, 0.5 * (y0 + y1 - cs)), max(y1, 0.5 * (y0 + y1 + cs))
        if anchor is not None:
            if viewpoints is None:
                vp = (0.0, 0.0)
            else:
                v = viewpoints[sl][comp]
                vp = tuple((o[:, None] * v).sum(axis=0) / o.sum())
            x0, x1, y0, y1 = _complete(x0, x1, y0, y1, vp, anchor)
        boxes.append(
            DetectionBox(
                center=(0.5 * (x0 + x1), 0.5 * (y0 + y1)),
                length=x1 - x0,
                width=y1 - y0,
                yaw=0.0,
                score=float(np.clip(o.mean() * support, 0.0, 1.0)),
                risk=float(np.clip(risk[sl][comp].max(), 0.0, 1.0)),
            )
        )
    return boxes


def decode_risk(fused: FeatureField) -> RiskMap:
    return RiskMap(fused.grid, np.clip(fused.values[RISK], 0.0, 1.0))

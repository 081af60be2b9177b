"""Discrete-time multi-agent simulation of the risk-aware handshake.

Each frame runs, in order: kinematics (scripted tracks), ray-cast sensing
and blind-zone update, beacon broadcast, trigger evaluation, handshakes
(request, budgeted response, fusion), detection decoding and logging.

Sensing does not depend on the communication policy, so it is computed
once per scene in a :class:`SceneSensing` cache and shared by every policy
and budget run over that scene.  The channel is synchronous and lossless.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ProtocolError, ValidationError
from .features import OCC, surrogate_vectors
from .fusion import DEFAULT_ANCHOR, DetectionBox, decode_detections, fuse_base, label_components
from .features import FeatureField
from .grid import (
    BlindZoneMask,
    FovSpec,
    GridSpec,
    Pose2D,
    RaycastParams,
    build_occupancy,
    occlusion_map,
    stabilize_blind_zone,
    warp_indices,
)
from .protocol import (
    SRACP,
    CommPolicy,
    CoverageBeacon,
    CPRequest,
    CPResponse,
    FixedNeighborEqual,
    LowerBound,
    RandomCell,
    UpperBound,
)
from .risk import ObjectState, RiskMap, RiskWeights, cell_risk_prior, footprint_mask, object_risk, risk_labels
from .scenario import DEFAULT_JITTER, DEFAULT_RAYS, Scene, raycast_points
from .selection import (
    BudgetSpec,
    FeaturePayload,
    SelectionMask,
    capacity_cells,
    compute_gain,
    deserialize_payload,
    select_cells,
    serialize_cells,
)

__all__ = [
    "SimConfig",
    "AgentView",
    "ResponderState",
    "OutgoingCells",
    "FrameRecord",
    "SceneSensing",
    "needs_cooperation",
    "select_partner",
    "handle_request",
    "simulate_scene",
    "ground_truth",
    "explained_cells",
    "coverage_summary",
    "write_ndjson",
    "read_ndjson",
]

DEFAULT_GRID = GridSpec.centered(32.0)
MAX_TRACK_SPEED = 20.0  # m/s, bounds the motion search


@dataclass(frozen=True)
class SimConfig:
    grid: GridSpec = DEFAULT_GRID
    fov: FovSpec = FovSpec()
    rays: int = DEFAULT_RAYS
    jitter: float = DEFAULT_JITTER
    lambda_attenuation: float = 2.0
    tau_occ: float = 0.5
    tau_t: float = 0.5
    K_t: int = 3
    tau_r: float = 0.3
    l_c: float = 100.0
    budget: BudgetSpec = BudgetSpec()
    policy: CommPolicy = SRACP()
    seed: int = 0
    n_frames: Optional[int] = None
    weights: RiskWeights = RiskWeights()
    occupancy_threshold: float = 0.3
    min_cells: int = 2
    anchor: Optional[tuple[float, float]] = DEFAULT_ANCHOR
    connectivity: int = 8
    merge_gap: int = 1
    source_gap: Optional[int] = 2
    bridge_extent: Optional[tuple[float, float]] = (11.0, 3.0)
    fit_centers: bool = True
    beacon_clean: int = 1
    evidence_cells: Optional[float] = 4.0
    track_gap: int = 2
    explained_margin: Optional[float] = 0.4

    def __post_init__(self):
        if not self.l_c > 0:
            raise ValidationError("l_c must be positive")
        for name in ("tau_r", "tau_occ", "tau_t", "occupancy_threshold"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValidationError(f"{name} must lie in (0, 1), got {v}")
        if self.K_t < 1:
            raise ValidationError("K_t must be >= 1")
        if self.rays < 1 or self.jitter < 0:
            raise ValidationError("rays must be >= 1 and jitter >= 0")
        if self.n_frames is not None and self.n_frames < 1:
            raise ValidationError("n_frames must be >= 1")
        if self.merge_gap < 0 or (self.source_gap is not None and self.source_gap < 0):
            raise ValidationError("merge_gap and source_gap must be >= 0")
        if self.connectivity not in (4, 8):
            raise ValidationError("connectivity must be 4 or 8")
        if self.explained_margin is not None and self.explained_margin < 0:
            raise ValidationError("explained_margin must be >= 0 or None")
        if self.evidence_cells is not None and not self.evidence_cells > 0:
            raise ValidationError("evidence_cells must be positive or None")
        if self.bridge_extent is not None:
            object.__setattr__(self, "bridge_extent", tuple(float(e) for e in self.bridge_extent))
            if len(self.bridge_extent) != 2 or min(self.bridge_extent) <= 0:
                raise ValidationError("bridge_extent must be two positive lengths or None")
        if self.beacon_clean < 0:
            raise ValidationError("beacon_clean must be >= 0")
        if self.min_cells < 1 or self.track_gap < 1:
            raise ValidationError("min_cells and track_gap must be >= 1")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValidationError("seed must be a non-negative integer")
        if not isinstance(self.policy, (SRACP, UpperBound, LowerBound, FixedNeighborEqual, RandomCell)):
            raise ValidationError(f"unknown policy {self.policy!r}")
        RaycastParams.for_grid(self.grid, self.lambda_attenuation).check(self.grid)

    @property
    def raycast(self) -> RaycastParams:
        return RaycastParams.for_grid(self.grid, self.lambda_attenuation)

    def sensing_key(self) -> tuple:
        """Fields that influence sensing; runs sharing a key can share a cache."""
        return (self.grid, self.fov, self.rays, self.jitter, self.lambda_attenuation, self.tau_occ,
                self.tau_t, self.K_t, self.tau_r, self.l_c, self.seed, self.weights,
                self.occupancy_threshold, self.min_cells, self.anchor, self.connectivity,
                self.merge_gap, self.source_gap, self.bridge_extent, self.fit_centers,
                self.beacon_clean, self.evidence_cells, self.track_gap, self.explained_margin)


# ---------------------------------------------------------------------------
# protocol decisions


def needs_cooperation(blind, risk, tau_r: float) -> tuple[bool, np.ndarray]:
    """Whether a blind cell carries risk above ``tau_r``; also returns those cells."""
    O = blind.occluded if isinstance(blind, BlindZoneMask) else np.asarray(blind, bool)
    R = risk.values if isinstance(risk, RiskMap) else np.asarray(risk, float)
    if O.shape != R.shape:
        raise ValidationError("blind zone and risk map shapes differ")
    risky = O & (R > tau_r)
    return bool(risky.any()), risky


def select_partner(
    risky: np.ndarray,
    beacons: Sequence[CoverageBeacon],
    grid: Optional[GridSpec] = None,
    requester_pose: Optional[Pose2D] = None,
) -> Optional[int]:
    """Sender whose beaconed coverage contains the most risky cells.

    Coverage is warped into the requester's grid when ``grid`` and
    ``requester_pose`` are given (cells outside the sender's grid count as
    not covered); otherwise beacons are taken to share the requester frame.
    """
    risky = np.asarray(risky, bool)
    best, best_count = None, 0
    for b in sorted(beacons, key=lambda b: b.sender):
        cov = b.coverage
        if grid is not None and requester_pose is not None:
            idx, valid = warp_indices(grid, Pose2D(b.position), grid, requester_pose)
            cov = cov.ravel()[idx] & valid
        count = int(np.count_nonzero(cov & risky))
        if count > best_count:
            best, best_count = b.sender, count
    return best


@dataclass(frozen=True)
class ResponderState:
    """What a responder knows locally when answering a request.

    ``occupancy`` and ``occ_prob`` live in the responder's own grid.
    ``tracks`` are its detections as world-frame objects with estimated
    velocities.
    """

    agent: int
    frame: int
    pose: Pose2D
    grid: GridSpec
    occupancy: np.ndarray
    occ_prob: np.ndarray
    tracks: tuple[ObjectState, ...] = ()
    intersections: tuple = ()
    weights: RiskWeights = RiskWeights()

    def warped(self, dst_pose: Pose2D) -> tuple[np.ndarray, np.ndarray]:
        idx, valid = warp_indices(self.grid, self.pose, self.grid, dst_pose)
        occ = np.where(valid, self.occupancy.ravel()[idx], 0.0)
        p = np.where(valid, self.occ_prob.ravel()[idx], 1.0)
        return occ, p

    def track_risk(self, dst_pose: Pose2D, dst_velocity) -> np.ndarray:
        """Risk of each tracked detection w.r.t. the receiver, painted on its footprint."""
        values = np.zeros(self.grid.shape)
        if not self.tracks:
            return values
        receiver = ObjectState(-1, dst_pose.translation, tuple(dst_velocity))
        pool = list(self.tracks)
        pad = 2 * self.grid.cell_size  # surface returns sit on the box boundary
        for t in self.tracks:
            rho = object_risk(t, receiver, pool, self.intersections, self.weights)
            grown = replace(t, length=t.length + pad, width=t.width + pad)
            np.maximum(values, np.where(footprint_mask(grown, self.grid, dst_pose), rho, 0.0), out=values)
        return values


@dataclass(frozen=True)
class OutgoingCells:
    """A responder's base statistics at its occupied cells, in the receiver grid.

    ``values`` rows are (occupancy, risk, occlusion probability); every
    other cell is empty and never worth sending.
    """

    cells: np.ndarray
    values: np.ndarray


def _outgoing(responder: ResponderState, dst_pose: Pose2D, dst_velocity) -> OutgoingCells:
    occ, occ_prob = responder.warped(dst_pose)
    cells = np.flatnonzero(occ.ravel() > 0)
    risk = responder.track_risk(dst_pose, dst_velocity).ravel()[cells]
    return OutgoingCells(cells, np.stack([occ.ravel()[cells], risk, occ_prob.ravel()[cells]]))


def _uniform_cells(candidates: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    if k >= len(candidates):
        return candidates
    return np.sort(rng.choice(candidates, size=k, replace=False))


def handle_request(
    responder: ResponderState,
    request: CPRequest,
    budget: BudgetSpec,
    policy: CommPolicy,
    rng: Optional[np.random.Generator] = None,
    n_links: int = 1,
    base: Optional[OutgoingCells] = None,
) -> CPResponse:
    """Select and serialize the responder's cells for one request.

    ``base`` may pass precomputed :class:`OutgoingCells` for the requester
    grid.  ``n_links`` divides the budget for the equal-split
    baseline.
    """
    grid = responder.grid
    if request.grid_hash != grid.hash():
        raise ProtocolError("request grid does not match responder grid")
    if request.target != responder.agent:
        raise ProtocolError(f"request addressed to {request.target}, not {responder.agent}")
    if isinstance(policy, LowerBound):
        raise ValidationError("the no-cooperation policy never answers requests")
    if base is None:
        base = _outgoing(responder, Pose2D(request.position), request.velocity)
    cells = base.cells
    vals = base.values.copy()
    # the requester's own risk estimate counts wherever the responder has returns
    vals[1] = np.maximum(vals[1], np.where(request.risky.ravel()[cells], request.risk.ravel()[cells], 0.0))
    meta = (responder.agent, request.frame)
    if isinstance(policy, UpperBound):
        mask = SelectionMask.from_indices(grid, cells)
        enforce = False
    else:
        enforce = True
        if isinstance(policy, FixedNeighborEqual):
            budget = budget.with_bytes(budget.B_bytes // max(1, n_links))
        k = capacity_cells(budget)
        if isinstance(policy, SRACP):
            g_sp = np.zeros(grid.n_cells)
            g_risk = np.zeros(grid.n_cells)
            g_sp[cells] = vals[0]
            g_risk[cells] = vals[1]
            blind = BlindZoneMask(grid, request.blind, request.blind.astype(float))
            gain = compute_gain(g_sp.reshape(grid.shape), g_risk.reshape(grid.shape), blind, policy.alpha)
            mask = select_cells(gain, k, policy.gate)
        else:
            if rng is None:
                raise ValidationError("random selection policies need an rng")
            mask = SelectionMask.from_indices(grid, _uniform_cells(cells, k, rng))
    pos = np.searchsorted(cells, mask.selected)
    vectors = surrogate_vectors(vals[:, pos], budget.C)
    payload = serialize_cells(vectors, mask, budget, meta, enforce_budget=enforce)
    # a header-only reply is always allowed, even when B_bytes is below the header
    if enforce and len(payload) > max(budget.B_bytes, budget.h_hdr):
        raise ProtocolError("payload exceeds budget")
    return CPResponse(responder.agent, request.requester, payload)


# ---------------------------------------------------------------------------
# sensing cache


@dataclass
class AgentView:
    """Policy-independent per-agent, per-frame sensing products (grid frame)."""

    agent: int
    frame: int
    pose: Pose2D
    velocity: tuple[float, float]
    raw_occluded: np.ndarray
    blind: BlindZoneMask
    risky: np.ndarray
    base: np.ndarray  # (3, H, W): occupancy, own risk, occlusion probability
    detections: list[DetectionBox]
    tracks: tuple[ObjectState, ...] = ()
    beacon: bytes = b""

    @property
    def occupancy(self) -> np.ndarray:
        return self.base[OCC]

    def responder(self, grid: GridSpec, intersections, weights) -> ResponderState:
        return ResponderState(self.agent, self.frame, self.pose, grid, self.occupancy, self.blind.occ_prob,
                              self.tracks, tuple(intersections), weights)


def _extent_cells(extent: Optional[tuple[float, float]], cell_size: float):
    return None if extent is None else tuple(e / cell_size for e in extent)


def _component_motion(occ: np.ndarray, prev: np.ndarray, threshold: float, min_cells: int,
                      max_shift: int, connectivity: int = 4, merge_gap: int = 0,
                      source_gap: Optional[int] = None,
                      max_extent: Optional[tuple[float, float]] = None) -> list[tuple[int, int]]:
    """Cell displacement of each occupied component since an earlier frame.

    ``prev`` is the earlier occupancy warped into the current grid.  For
    every 4-connected component (same order and filtering as the decoder),
    the integer shift that best overlays its cells on ``prev`` is found;
    the motion is the negated shift.  Ties prefer the smallest shift, so a
    static object never appears to move.
    """
    labels, n = label_components(occ, threshold, connectivity, merge_gap, source_gap=source_gap,
                                 max_extent=max_extent)
    H, W = occ.shape
    r = np.arange(-max_shift, max_shift + 1)
    di, dj = np.meshgrid(r, r, indexing="ij")
    di, dj = di.ravel(), dj.ravel()
    order = np.lexsort((np.abs(dj), np.abs(di), di * di + dj * dj))
    di, dj = di[order], dj[order]
    out = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels[sl] == lab
        if int(comp.sum()) < min_cells:
            continue
        ii, jj = np.nonzero(comp)
        ii = ii + sl[0].start
        jj = jj + sl[1].start
        pi = ii[None, :] + di[:, None]
        pj = jj[None, :] + dj[:, None]
        ok = (pi >= 0) & (pi < H) & (pj >= 0) & (pj < W)
        score = np.where(ok, prev[np.clip(pi, 0, H - 1), np.clip(pj, 0, W - 1)], 0.0).sum(axis=1)
        best = int(np.argmax(score))
        out.append((-int(di[best]), -int(dj[best])) if score[best] > 0 else (0, 0))
    return out


def coverage_summary(occluded: np.ndarray, iterations: int) -> np.ndarray:
    """Blind mask as broadcast in beacons: closed then opened with a 3x3 square.

    Ray jitter leaves single-cell speckle along blind-zone borders, and each
    speckle costs two run lengths.  Smoothing it away roughly halves the
    beacon while leaving the large occluded regions intact.
    """
    if iterations == 0:
        return np.asarray(occluded, bool)
    square = ndimage.generate_binary_structure(2, 2)
    closed = ndimage.binary_closing(occluded, square, iterations=iterations)
    return ndimage.binary_opening(closed, square, iterations=iterations)


def explained_cells(objects: Sequence[ObjectState], grid: GridSpec, pose: Pose2D, margin: float) -> np.ndarray:
    """Cells inside any of the agent's own detected boxes, grown by ``margin`` metres.

    An occluded cell that lies inside something the agent already detects
    (the hidden far side of a vehicle it sees) is not an unknown; removing
    such cells keeps requests and gains focused on genuinely unseen space.
    """
    out = np.zeros(grid.shape, dtype=bool)
    for o in objects:
        out |= footprint_mask(replace(o, length=o.length + 2 * margin, width=o.width + 2 * margin), grid, pose)
    return out


def _box_objects(boxes: Sequence[DetectionBox], pose: Pose2D) -> list[ObjectState]:
    out = []
    for n, b in enumerate(boxes):
        c = (b.center[0] + pose.translation[0], b.center[1] + pose.translation[1])
        out.append(ObjectState(100_000 + n, c, (0.0, 0.0), b.length, b.width, b.yaw + pose.rotation))
    return out


def ground_truth(scene: Scene, agent: int, frame: int, grid: GridSpec, weights: RiskWeights) -> list[dict]:
    """Boxes (agent grid frame) with risk labels for objects whose centre lies in the grid."""
    objs = scene.objects_at(frame)
    me = next(o for o in objs if o.id == agent)
    labels = risk_labels(objs, me, scene.intersections, weights)
    out = []
    for o in objs:
        if o.id == agent:
            continue
        x, y = o.position[0] - me.position[0], o.position[1] - me.position[1]
        if not (grid.x_min <= x < grid.x_max and grid.y_min <= y < grid.y_max):
            continue
        box = DetectionBox((x, y), o.length, o.width, o.yaw, 1.0, labels[o.id])
        out.append({"id": o.id, **box.to_dict()})
    return out


class SceneSensing:
    """Lazily computed sensing products for one scene under one sensing key."""

    def __init__(self, scene: Scene, config: SimConfig):
        self.scene = scene
        self.config = config
        self.key = config.sensing_key()
        self.n_frames = min(scene.duration, config.n_frames or scene.duration)
        self._views: dict[tuple[int, int], AgentView] = {}
        self._frames: dict[int, dict] = {}
        self._outgoing: dict[tuple[int, int, int], np.ndarray] = {}

    def compatible(self, config: SimConfig) -> bool:
        return config.sensing_key() == self.key

    # -- per agent ----------------------------------------------------------
    def view(self, agent: int, frame: int) -> AgentView:
        key = (agent, frame)
        if key in self._views:
            return self._views[key]
        cfg, scene, grid = self.config, self.scene, self.config.grid
        me = scene.object_at(agent, frame)
        pose = Pose2D(me.position)
        pts = raycast_points(scene, agent, frame, cfg.fov, cfg.rays, cfg.seed, cfg.jitter)
        occ = build_occupancy(pts, pose, grid)
        raw = occlusion_map(occ, cfg.fov, cfg.raycast, cfg.tau_occ)
        history = []
        for f in range(max(0, frame - cfg.K_t + 1), frame):
            past = self.view(agent, f)
            history.append((BlindZoneMask(grid, past.raw_occluded, past.base[2]), past.pose))
        blind = stabilize_blind_zone(history + [(raw, pose)], pose, cfg.tau_t)
        prior = cell_risk_prior(grid, pose, scene.intersections, cfg.weights)
        own_risk = np.where(occ.values > 0, prior, 0.0)
        base = np.stack([occ.values, own_risk, blind.occ_prob])
        dets = decode_detections(FeatureField(grid, base), cfg.occupancy_threshold, cfg.min_cells, cfg.anchor,
                                 connectivity=cfg.connectivity, merge_gap=cfg.merge_gap, source_gap=cfg.source_gap,
                                 fit_centers=cfg.fit_centers, evidence_cells=cfg.evidence_cells,
                                 bridge_extent=cfg.bridge_extent)
        tracks = _box_objects(dets, pose)
        occluded = blind.occluded
        if cfg.explained_margin is not None:
            # only the observed support explains a shadow, never the anchor extrapolation
            support = decode_detections(FeatureField(grid, base), cfg.occupancy_threshold, cfg.min_cells, None,
                                        connectivity=cfg.connectivity, merge_gap=cfg.merge_gap,
                                        source_gap=cfg.source_gap, fit_centers=cfg.fit_centers,
                                        bridge_extent=cfg.bridge_extent)
            occluded = occluded & ~explained_cells(_box_objects(support, pose), grid, pose, cfg.explained_margin)
        blind = BlindZoneMask(grid, occluded, base[2])
        _, risky = needs_cooperation(blind, prior, cfg.tau_r)
        if frame > 0:
            back = min(cfg.track_gap, frame)
            pv = self.view(agent, frame - back)
            idx, valid = warp_indices(grid, pv.pose, grid, pose)
            prev = np.where(valid, pv.occupancy.ravel()[idx], 0.0)
            span = back * scene.dt
            max_shift = int(math.ceil(MAX_TRACK_SPEED * span / grid.cell_size))
            motion = _component_motion(occ.values, prev, cfg.occupancy_threshold, cfg.min_cells, max_shift,
                                       cfg.connectivity, cfg.merge_gap, cfg.source_gap,
                                       _extent_cells(cfg.bridge_extent, grid.cell_size))
            cs = grid.cell_size
            tracks = [replace(t, velocity=(m[1] * cs / span, m[0] * cs / span)) for t, m in zip(tracks, motion)]
        beacon = CoverageBeacon(agent, frame, pose.translation, me.velocity,
                                coverage_summary(blind.occluded, cfg.beacon_clean)).encode()
        v = AgentView(agent, frame, pose, me.velocity, raw.occluded, blind, risky, base, dets,
                      tuple(tracks), beacon)
        self._views[key] = v
        return v

    # -- per frame ----------------------------------------------------------
    def frame(self, frame: int) -> dict:
        """Beacons, neighbour sets, trigger and partner choice for every agent."""
        if frame in self._frames:
            return self._frames[frame]
        cfg, scene, grid = self.config, self.scene, self.config.grid
        agents = scene.connected_ids
        views = {a: self.view(a, frame) for a in agents}
        beacons = {a: CoverageBeacon.decode(views[a].beacon, grid.shape) for a in agents}
        neighbors = {}
        for a in agents:
            pa = views[a].pose.translation
            neighbors[a] = [b for b in agents if b != a and
                            math.hypot(pa[0] - views[b].pose.translation[0],
                                       pa[1] - views[b].pose.translation[1]) <= cfg.l_c]
        partner, request = {}, {}
        for a in agents:
            v = views[a]
            trigger = bool(v.risky.any())
            p = select_partner(v.risky, [beacons[b] for b in neighbors[a]], grid, v.pose) if trigger else None
            partner[a] = p
            if p is not None:
                request[a] = CPRequest(a, p, frame, v.pose.translation, v.velocity, grid.hash(),
                                       v.blind.occluded, v.risky, self.prior(a, frame)).encode()
        decoded = {a: CPRequest.decode(d, grid.shape, expected_grid_hash=grid.hash()) for a, d in request.items()}
        info = {"views": views, "beacons": beacons, "neighbors": neighbors, "partner": partner,
                "request": request, "decoded": decoded}
        self._frames[frame] = info
        return info

    def prior(self, agent: int, frame: int) -> np.ndarray:
        """The agent's cell risk prior (recomputed; cheap and not cached)."""
        v = self.view(agent, frame)
        return cell_risk_prior(self.config.grid, v.pose, self.scene.intersections, self.config.weights)

    def outgoing(self, sender: int, receiver: int, frame: int) -> OutgoingCells:
        key = (sender, receiver, frame)
        if key not in self._outgoing:
            info = self.frame(frame)
            b = info["beacons"][receiver]
            sv = info["views"][sender]
            resp = sv.responder(self.config.grid, self.scene.intersections, self.config.weights)
            self._outgoing[key] = _outgoing(resp, Pose2D(b.position), b.velocity)
        return self._outgoing[key]

    def responder(self, agent: int, frame: int) -> ResponderState:
        return self.view(agent, frame).responder(self.config.grid, self.scene.intersections, self.config.weights)


# ---------------------------------------------------------------------------
# frame loop


@dataclass(frozen=True)
class FrameRecord:
    scene: str
    frame: int
    agent: int
    policy: str
    budget_bytes: int
    bytes_beacon: int
    bytes_request: int
    bytes_payload: int
    requests: tuple[int, ...]
    responses: tuple[int, ...]
    detections: tuple[dict, ...]
    ground_truth: Optional[tuple[dict, ...]] = None
    payload_sizes: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        d = {
            "scene": self.scene,
            "frame": self.frame,
            "agent": self.agent,
            "policy": self.policy,
            "budget_bytes": self.budget_bytes,
            "bytes_beacon": self.bytes_beacon,
            "bytes_request": self.bytes_request,
            "bytes_payload": self.bytes_payload,
            "payload_sizes": list(self.payload_sizes),
            "requests": list(self.requests),
            "responses": list(self.responses),
            "detections": list(self.detections),
        }
        if self.ground_truth is not None:
            d["ground_truth"] = list(self.ground_truth)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrameRecord":
        gt = d.get("ground_truth")
        return cls(d["scene"], int(d["frame"]), int(d["agent"]), d["policy"], int(d["budget_bytes"]),
                   int(d["bytes_beacon"]), int(d["bytes_request"]), int(d["bytes_payload"]),
                   tuple(d["requests"]), tuple(d["responses"]), tuple(d["detections"]),
                   None if gt is None else tuple(gt), tuple(d.get("payload_sizes", ())))

    @property
    def bytes_total(self) -> int:
        return self.bytes_beacon + self.bytes_request + self.bytes_payload


def _round_box(b: DetectionBox) -> dict:
    d = b.to_dict()
    d["center"] = [round(c, 6) for c in d["center"]]
    for k in ("length", "width", "yaw", "score", "risk"):
        d[k] = round(d[k], 6)
    return d


def _mask_self(fused: FeatureField, me: ObjectState, pose: Pose2D) -> FeatureField:
    """Clear the receiver's own body from fused occupancy before decoding.

    Partners observe the receiver, and those cells would otherwise decode as
    a box or bridge into an adjacent object.  The footprint is grown by one
    cell so surface returns just outside the box are cleared too.
    """
    grid = fused.grid
    pad = grid.cell_size
    body = footprint_mask(replace(me, length=me.length + 2 * pad, width=me.width + 2 * pad), grid, pose)
    values = fused.values.copy()
    values[OCC][body] = 0.0
    return FeatureField(grid, values)


def _viewpoints(grid: GridSpec, prov, dom: np.ndarray, positions: dict[int, tuple[float, float]], origin
                ) -> np.ndarray:
    table = np.array([[positions[a][0] - origin[0], positions[a][1] - origin[1]] for a in prov.agent_ids])
    return table[dom]


def step(sensing: SceneSensing, config: SimConfig, frame: int, decode_agents: Optional[Sequence[int]] = None
         ) -> list[FrameRecord]:
    """Run one frame of the protocol under ``config.policy``; one record per agent."""
    if not sensing.compatible(config):
        raise ValidationError("sensing cache was built for a different configuration")
    scene, grid, policy, budget = sensing.scene, config.grid, config.policy, config.budget
    info = sensing.frame(frame)
    views, neighbors = info["views"], info["neighbors"]
    agents = scene.connected_ids
    ghash = grid.hash()
    inbox: dict[int, list[tuple[FeaturePayload, SelectionMask]]] = {a: [] for a in agents}
    sizes: dict[int, list[int]] = {a: [] for a in agents}
    sent_req: dict[int, list[int]] = {a: [] for a in agents}
    req_bytes = {a: 0 for a in agents}

    def deliver(receiver: int, resp: CPResponse):
        env = CPResponse.decode(resp.encode())
        if env.requester != receiver:
            raise ProtocolError("response delivered to the wrong agent")
        payload = deserialize_payload(env.payload, budget, expected_grid_hash=ghash)
        full = SelectionMask.from_indices(grid, payload.indices)
        inbox[receiver].append((payload, full))
        sizes[receiver].append(len(env.payload))

    if isinstance(policy, (SRACP, RandomCell)):
        for a in agents:
            data = info["request"].get(a)
            if data is None:
                continue
            req = info["decoded"][a]  # wire round trip done once in the sensing cache
            sent_req[a].append(req.target)
            req_bytes[a] += len(data)
            rng = np.random.default_rng([config.seed, frame, a])
            base = sensing.outgoing(req.target, a, frame)
            resp = handle_request(sensing.responder(req.target, frame), req, budget, policy, rng, base=base)
            deliver(a, resp)
    elif isinstance(policy, (UpperBound, FixedNeighborEqual)):
        for a in agents:
            nbrs = neighbors[a]
            rng = np.random.default_rng([config.seed, frame, a])
            v = views[a]
            for j in nbrs:
                # broadcast baselines answer an implicit standing request
                req = CPRequest(a, j, frame, v.pose.translation, v.velocity, ghash,
                                np.ones(grid.shape, bool), np.zeros(grid.shape, bool), np.zeros(grid.shape))
                resp = handle_request(sensing.responder(j, frame), req, budget, policy, rng,
                                      n_links=len(nbrs), base=sensing.outgoing(j, a, frame))
                deliver(a, resp)

    records = []
    positions = {a: views[a].pose.translation for a in agents}
    for a in agents:
        v = views[a]
        decode = decode_agents is None or a in decode_agents
        dets: list[DetectionBox] = []
        if decode:
            partners = [(p, m) for p, m in inbox[a] if p.n_cells]
            if partners:
                fused, prov = fuse_base(v.base, grid, partners, budget.C, ego_id=a)
                dom = prov.dominant()
                vp = _viewpoints(grid, prov, dom, positions, v.pose.translation)
                fused = _mask_self(fused, scene.object_at(a, frame), v.pose)
                dets = decode_detections(fused, config.occupancy_threshold, config.min_cells, config.anchor, vp,
                                         config.connectivity, config.merge_gap, dom, config.source_gap,
                                         config.fit_centers, config.evidence_cells, config.bridge_extent)
            else:
                dets = v.detections
        gt = None
        if a == scene.ego_id:
            gt = tuple(ground_truth(scene, a, frame, grid, config.weights))
            gt = tuple({**g, "center": [round(c, 6) for c in g["center"]], "risk": round(g["risk"], 9)} for g in gt)
        records.append(FrameRecord(
            scene=scene.name, frame=frame, agent=a, policy=policy.name, budget_bytes=budget.B_bytes,
            bytes_beacon=len(v.beacon), bytes_request=req_bytes[a], bytes_payload=sum(sizes[a]),
            requests=tuple(sent_req[a]), responses=tuple(p.sender for p, _ in inbox[a]),
            detections=tuple(_round_box(b) for b in dets), ground_truth=gt, payload_sizes=tuple(sizes[a]),
        ))
    return records


def simulate_scene(scene: Scene, config: SimConfig, sensing: Optional[SceneSensing] = None,
                   decode_agents: Optional[Sequence[int]] = None) -> list[FrameRecord]:
    """All frames of one scene; ``sensing`` may be shared across policy runs."""
    if sensing is None or not sensing.compatible(config) or sensing.scene is not scene:
        sensing = SceneSensing(scene, config)
    out = []
    for f in range(sensing.n_frames):
        out.extend(step(sensing, config, f, decode_agents))
    return out


def write_ndjson(records: Sequence[FrameRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def read_ndjson(path) -> list[FrameRecord]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(FrameRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{n}: corrupt log record ({exc})") from exc
    return out

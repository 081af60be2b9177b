"""Object risk scores, BEV risk rasters and the inter-object risk matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .grid import GridSpec, Pose2D, world_to_ego

__all__ = [
    "ObjectState",
    "RiskWeights",
    "RiskMap",
    "RiskMatrix",
    "distance_risk",
    "speed_risk",
    "intersection_risk",
    "total_risk",
    "object_risk",
    "risk_labels",
    "footprint_mask",
    "rasterize_risk_map",
    "cell_risk_prior",
    "pairwise_risk_matrix",
    "dangerous_set",
]


@dataclass(frozen=True)
class ObjectState:
    id: int
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    length: float = 4.2
    width: float = 1.8
    yaw: float = 0.0
    is_connected: bool = False
    height: float = 1.6

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValidationError(f"object {self.id}: length and width must be positive")
        kin = (*self.position, *self.velocity, self.yaw)
        if not all(math.isfinite(v) for v in kin):
            raise ValidationError(f"object {self.id}: non-finite kinematics")
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))
        object.__setattr__(self, "velocity", (float(self.velocity[0]), float(self.velocity[1])))

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)

    def corners(self) -> np.ndarray:
        """(4, 2) box corners in world coordinates, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.position)


@dataclass(frozen=True)
class RiskWeights:
    alpha_d: float = 0.5
    alpha_s: float = 0.3
    alpha_n: float = 0.2
    lambda_d: float = 0.05
    lambda_n: float = 0.02
    epsilon: float = 0.01

    def __post_init__(self):
        vals = (self.alpha_d, self.alpha_s, self.alpha_n, self.lambda_d, self.lambda_n, self.epsilon)
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValidationError("risk weights must be finite and non-negative")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")


@dataclass(frozen=True)
class RiskMap:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValidationError("risk map shape does not match grid")


@dataclass(frozen=True)
class RiskMatrix:
    ego_id: int
    entries: tuple[tuple[int, float], ...] = ()

    def as_dict(self) -> dict[int, float]:
        return dict(self.entries)


def distance_risk(p_obj, p_ego, lambda_d: float) -> float:
    d = math.hypot(p_obj[0] - p_ego[0], p_obj[1] - p_ego[1])
    return math.exp(-lambda_d * d)


def _rel_speed(a: ObjectState, ego: ObjectState) -> float:
    return math.hypot(a.velocity[0] - ego.velocity[0], a.velocity[1] - ego.velocity[1])


def speed_risk(obj: ObjectState, ego: ObjectState, scene_objects: Sequence[ObjectState], epsilon: float) -> float:
    """Relative speed to the ego, normalized by the scene-wide maximum."""
    if not scene_objects:
        raise ValidationError("scene_objects must be non-empty")
    top = max(_rel_speed(o, ego) for o in scene_objects)
    return _rel_speed(obj, ego) / (top + epsilon)


def intersection_risk(p_obj, intersections: Sequence, lambda_n: float) -> float:
    # open road: no intersection hazard
    if len(intersections) == 0:
        return 0.0
    d = min(math.hypot(p_obj[0] - q[0], p_obj[1] - q[1]) for q in intersections)
    return math.exp(-lambda_n * d)


def total_risk(components: tuple[float, float, float], weights: RiskWeights) -> float:
    r_d, r_s, r_n = components
    raw = weights.alpha_d * r_d + weights.alpha_s * r_s + weights.alpha_n * r_n
    return min(1.0, max(0.0, raw))


def object_risk(
    obj: ObjectState,
    ego: ObjectState,
    scene_objects: Sequence[ObjectState],
    intersections: Sequence,
    weights: RiskWeights,
) -> float:
    comps = (
        distance_risk(obj.position, ego.position, weights.lambda_d),
        speed_risk(obj, ego, scene_objects, weights.epsilon),
        intersection_risk(obj.position, intersections, weights.lambda_n),
    )
    return total_risk(comps, weights)


def risk_labels(
    objects: Sequence[ObjectState], ego: ObjectState, intersections: Sequence, weights: RiskWeights
) -> dict[int, float]:
    """Clipped risk score for every non-ego object, keyed by id."""
    others = [o for o in objects if o.id != ego.id]
    if not others:
        return {}
    return {o.id: object_risk(o, ego, others, intersections, weights) for o in others}


def footprint_mask(obj: ObjectState, grid: GridSpec, ego_pose: Pose2D) -> np.ndarray:
    """Cells whose centre lies inside the object's oriented box (closed)."""
    X, Y = grid.cell_centers()
    centre = world_to_ego(np.asarray(obj.position), ego_pose)
    yaw = obj.yaw - ego_pose.rotation
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = X - centre[0], Y - centre[1]
    along = c * dx + s * dy
    across = -s * dx + c * dy
    eps = 1e-9
    return (np.abs(along) <= obj.length / 2 + eps) & (np.abs(across) <= obj.width / 2 + eps)


def rasterize_risk_map(
    objects: Sequence[ObjectState],
    ego: ObjectState,
    intersections: Sequence,
    weights: RiskWeights,
    grid: GridSpec,
    ego_pose: Optional[Pose2D] = None,
    scores: Optional[dict[int, float]] = None,
) -> RiskMap:
    """Paint each object's risk onto its footprint cells, max under overlap.

    ``scores`` overrides the computed per-object risk (keyed by id).
    """
    if ego_pose is None:
        ego_pose = Pose2D(ego.position)
    values = np.zeros(grid.shape)
    if scores is None:
        scores = risk_labels(objects, ego, intersections, weights)
    for obj in objects:
        if obj.id == ego.id or obj.id not in scores:
            continue
        fp = footprint_mask(obj, grid, ego_pose)
        np.maximum(values, np.where(fp, scores[obj.id], 0.0), out=values)
    return RiskMap(grid, values)


def cell_risk_prior(grid: GridSpec, ego_pose: Pose2D, intersections: Sequence, weights: RiskWeights) -> np.ndarray:
    """Risk a hypothetical object of unknown speed would carry at each cell.

    Distance and intersection terms only; the speed term is unobservable for
    an object nobody has seen.
    """
    X, Y = grid.cell_centers()
    r_d = np.exp(-weights.lambda_d * np.hypot(X, Y))
    if len(intersections):
        q = world_to_ego(np.asarray(intersections, dtype=float).reshape(-1, 2), ego_pose)
        d = np.min(np.hypot(X[..., None] - q[:, 0], Y[..., None] - q[:, 1]), axis=-1)
        r_n = np.exp(-weights.lambda_n * d)
    else:
        r_n = np.zeros(grid.shape)
    return np.clip(weights.alpha_d * r_d + weights.alpha_n * r_n, 0.0, 1.0)


def pairwise_risk_matrix(
    ego: ObjectState,
    neighbors: Sequence[ObjectState],
    intersections: Sequence,
    weights: RiskWeights,
    scene_objects: Optional[Sequence[ObjectState]] = None,
) -> RiskMatrix:
    """rho(e, i) for every neighbor, ordered by neighbor id.

    Speed risk is normalized over ``scene_objects`` (defaults to the
    neighbors themselves).
    """
    pool = list(scene_objects) if scene_objects else list(neighbors)
    pool_ids = {o.id for o in pool}
    pool += [n for n in neighbors if n.id not in pool_ids]
    entries = tuple(
        (n.id, object_risk(n, ego, pool, intersections, weights)) for n in sorted(neighbors, key=lambda o: o.id)
    )
    return RiskMatrix(ego.id, entries)


def dangerous_set(matrix: RiskMatrix, tau_r: float) -> set[int]:
    if not 0 <= tau_r <= 1:
        raise ValidationError("tau_r must lie in [0, 1]")
    return {i for i, rho in matrix.entries if rho > tau_r}

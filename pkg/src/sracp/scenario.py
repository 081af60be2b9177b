"""Synthetic driving scenes and 2D ray-cast point clouds.

Scenes are world-frame, north-up.  Every object follows a per-frame
waypoint script; velocities are finite differences of the script.  All
generation is seeded and deterministic.

Scene file schema (JSON)::

    {
      "kind": "UnprotectedLeftTurn",
      "seed": 0,
      "dt": 0.1,
      "duration": 8,
      "ego_id": 0,
      "intersections": [[x, y], ...],
      "planned_path": [[x, y], ...],
      "objects": [
        {"id": 0, "length": 4.2, "width": 1.8, "height": 1.6, "yaw": 1.5708,
         "connected": true, "role": "ego", "waypoints": [[x, y], ...]},
        ...
      ]
    }

``waypoints`` holds exactly ``duration`` entries.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .grid import FovSpec
from .risk import ObjectState

__all__ = [
    "ScenarioKind",
    "ObjectTrack",
    "Scene",
    "generate_scene",
    "raycast_points",
    "ray_hits",
    "save_scene",
    "load_scene",
    "DEFAULT_RAYS",
    "DEFAULT_JITTER",
]

DEFAULT_RAYS = 720
DEFAULT_JITTER = 0.05
SENSOR_HEIGHT = 1.7
LANE = 3.5

_HALF_PI = math.pi / 2


class ScenarioKind(enum.Enum):
    UnprotectedLeftTurn = "UnprotectedLeftTurn"
    Intersection = "Intersection"
    Merge = "Merge"
    HeadOn = "HeadOn"
    Overtake = "Overtake"
    StraightBaseline = "StraightBaseline"
    MultiAgent = "MultiAgent"

    @classmethod
    def parse(cls, text) -> "ScenarioKind":
        if isinstance(text, ScenarioKind):
            return text
        for k in cls:
            if k.value.lower() == str(text).lower():
                return k
        raise ValidationError(f"unknown scenario kind {text!r}; expected one of {[k.value for k in cls]}")


@dataclass(frozen=True)
class ObjectTrack:
    id: int
    waypoints: tuple[tuple[float, float], ...]
    length: float = 4.2
    width: float = 1.8
    height: float = 1.6
    yaw: float = 0.0
    connected: bool = False
    role: str = "traffic"

    def to_dict(self) -> dict:
        return {"id": self.id, "length": self.length, "width": self.width, "height": self.height,
                "yaw": self.yaw, "connected": self.connected, "role": self.role,
                "waypoints": [list(p) for p in self.waypoints]}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectTrack":
        known = {"id", "length", "width", "height", "yaw", "connected", "role", "waypoints"}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown object keys {sorted(extra)}")
        return cls(int(d["id"]), tuple((float(x), float(y)) for x, y in d["waypoints"]),
                   float(d.get("length", 4.2)), float(d.get("width", 1.8)), float(d.get("height", 1.6)),
                   float(d.get("yaw", 0.0)), bool(d.get("connected", False)), str(d.get("role", "traffic")))


@dataclass(frozen=True)
class Scene:
    kind: ScenarioKind
    seed: int
    objects: tuple[ObjectTrack, ...]
    intersections: tuple[tuple[float, float], ...] = ()
    ego_id: int = 0
    planned_path: tuple[tuple[float, float], ...] = ()
    duration: int = 8
    dt: float = 0.1

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValidationError("object ids must be unique")
        if not any(o.connected for o in self.objects):
            raise ValidationError("scene needs at least one connected agent")
        if self.ego_id not in ids or not self.track(self.ego_id).connected:
            raise ValidationError("ego must be a connected object of the scene")
        if self.duration < 1 or self.dt <= 0:
            raise ValidationError("duration must be >= 1 and dt > 0")
        for o in self.objects:
            if len(o.waypoints) != self.duration:
                raise ValidationError(f"object {o.id} has {len(o.waypoints)} waypoints, expected {self.duration}")
            if not (o.length > 0 and o.width > 0 and o.height > 0):
                raise ValidationError(f"object {o.id} has non-positive dimensions")
            if not all(math.isfinite(c) for p in o.waypoints for c in p):
                raise ValidationError(f"object {o.id} has non-finite waypoints")

    @property
    def name(self) -> str:
        return f"{self.kind.value}-{self.seed}"

    @property
    def connected_ids(self) -> list[int]:
        return sorted(o.id for o in self.objects if o.connected)

    def track(self, obj_id: int) -> ObjectTrack:
        for o in self.objects:
            if o.id == obj_id:
                return o
        raise KeyError(obj_id)

    def objects_at(self, frame: int) -> list[ObjectState]:
        if not 0 <= frame < self.duration:
            raise ValidationError(f"frame {frame} outside scene duration {self.duration}")
        out = []
        for o in self.objects:
            p = o.waypoints[frame]
            if self.duration == 1:
                v = (0.0, 0.0)
            elif frame + 1 < self.duration:
                q = o.waypoints[frame + 1]
                v = ((q[0] - p[0]) / self.dt, (q[1] - p[1]) / self.dt)
            else:
                q = o.waypoints[frame - 1]
                v = ((p[0] - q[0]) / self.dt, (p[1] - q[1]) / self.dt)
            out.append(ObjectState(o.id, p, v, o.length, o.width, o.yaw, o.connected, o.height))
        return out

    def object_at(self, obj_id: int, frame: int) -> ObjectState:
        for o in self.objects_at(frame):
            if o.id == obj_id:
                return o
        raise KeyError(obj_id)

    def ids_with_role(self, role: str) -> list[int]:
        return [o.id for o in self.objects if o.role == role]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "seed": self.seed,
            "dt": self.dt,
            "duration": self.duration,
            "ego_id": self.ego_id,
            "intersections": [list(q) for q in self.intersections],
            "planned_path": [list(p) for p in self.planned_path],
            "objects": [o.to_dict() for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        known = {"kind", "seed", "dt", "duration", "ego_id", "intersections", "planned_path", "objects"}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown scene keys {sorted(extra)}")
        missing = {"kind", "objects", "duration"} - set(d)
        if missing:
            raise ValidationError(f"scene file missing keys {sorted(missing)}")
        return cls(
            kind=ScenarioKind.parse(d["kind"]),
            seed=int(d.get("seed", 0)),
            objects=tuple(ObjectTrack.from_dict(o) for o in d["objects"]),
            intersections=tuple((float(x), float(y)) for x, y in d.get("intersections", [])),
            ego_id=int(d.get("ego_id", 0)),
            planned_path=tuple((float(x), float(y)) for x, y in d.get("planned_path", [])),
            duration=int(d["duration"]),
            dt=float(d.get("dt", 0.1)),
        )


def save_scene(scene: Scene, path) -> None:
    text = json.dumps(scene.to_dict(), indent=1, sort_keys=True)
    Path(path).write_text(text + "\n")


def load_scene(path) -> Scene:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return Scene.from_dict(data)


# ---------------------------------------------------------------------------
# generation


class _Builder:
    def __init__(self, duration: int, dt: float):
        self.duration = duration
        self.dt = dt
        self.tracks: list[ObjectTrack] = []

    def add(self, start, velocity=(0.0, 0.0), yaw=0.0, length=4.2, width=1.8, height=1.6,
            connected=False, role="traffic") -> int:
        oid = len(self.tracks)
        wps = tuple(
            (round(start[0] + velocity[0] * self.dt * k, 6), round(start[1] + velocity[1] * self.dt * k, 6))
            for k in range(self.duration)
        )
        self.tracks.append(ObjectTrack(oid, wps, length, width, height, yaw, connected, role))
        return oid

    def clear_of(self, start, velocity, length, width, yaw, margin=1.5) -> bool:
        """No overlap with existing tracks at any frame (axis-aligned approximation)."""
        for k in range(self.duration):
            p = (start[0] + velocity[0] * self.dt * k, start[1] + velocity[1] * self.dt * k)
            hx, hy = _half_extents(length, width, yaw)
            for t in self.tracks:
                q = t.waypoints[k]
                tx, ty = _half_extents(t.length, t.width, t.yaw)
                if abs(p[0] - q[0]) < hx + tx + margin and abs(p[1] - q[1]) < hy + ty + margin:
                    return False
        return True


def _half_extents(length, width, yaw):
    c, s = abs(math.cos(yaw)), abs(math.sin(yaw))
    return (c * length + s * width) / 2, (s * length + c * width) / 2


def _add_background(b: _Builder, rng, lanes, count, avoid_segments=()):
    """Random traffic on the given lanes, rejecting overlaps and sight-line blockers.

    ``lanes`` items: (axis_point, direction_unit, yaw, span) where vehicles
    are placed at ``axis_point + d * direction`` with ``d`` in ``span``.
    """
    placed = 0
    for _ in range(count * 30):
        if placed >= count:
            break
        origin, direction, yaw, (lo, hi), speed_range = lanes[rng.integers(len(lanes))]
        d = rng.uniform(lo, hi)
        speed = rng.uniform(*speed_range)
        start = (origin[0] + d * direction[0], origin[1] + d * direction[1])
        vel = (speed * direction[0], speed * direction[1])
        if not b.clear_of(start, vel, 4.2, 1.8, yaw, margin=2.0):
            continue
        if any(_track_blocks_segment(start, vel, yaw, b, seg) for seg in avoid_segments):
            continue
        b.add(start, vel, yaw)
        placed += 1


def _track_blocks_segment(start, vel, yaw, b: _Builder, seg) -> bool:
    """Whether a candidate car would cut any (track_a, track_b) sight line."""
    a_id, c_id = seg
    hx, hy = _half_extents(4.2, 1.8, yaw)
    for k in range(b.duration):
        p = (start[0] + vel[0] * b.dt * k, start[1] + vel[1] * b.dt * k)
        pa = b.tracks[a_id].waypoints[k]
        pc = b.tracks[c_id].waypoints[k]
        if _segment_hits_aabb(pa, pc, p, hx + 1.0, hy + 1.0):
            return True
    return False


def _segment_hits_aabb(p0, p1, c, hx, hy) -> bool:
    t0, t1 = 0.0, 1.0
    d = (p1[0] - p0[0], p1[1] - p0[1])
    for ax, h in ((0, hx), (1, hy)):
        lo, hi = c[ax] - h, c[ax] + h
        if abs(d[ax]) < 1e-12:
            if not lo <= p0[ax] <= hi:
                return False
            continue
        ta, tb = (lo - p0[ax]) / d[ax], (hi - p0[ax]) / d[ax]
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 > t1:
            return False
    return True


def _left_turn(b: _Builder, rng):
    j = lambda s: float(rng.uniform(-s, s))
    ego = b.add((LANE / 2, -9.0 + j(1.0)), (0.0, rng.uniform(0.5, 1.5)), _HALF_PI, connected=True, role="ego")
    b.add((-LANE / 2, 8.0 + j(0.5)), (0.0, 0.0), _HALF_PI, length=9.0, width=2.6, height=3.2, role="occluder")
    threat = b.add((-1.5 * LANE, 20.0 + j(1.0)), (0.0, -rng.uniform(10.0, 13.0)), -_HALF_PI, role="threat")
    b.add((-12.0 + j(1.0), -LANE / 2), (0.0, 0.0), 0.0, connected=True, role="partner")
    b.add((14.0 + j(1.0), LANE / 2), (-rng.uniform(0.0, 2.0), 0.0), math.pi, connected=True, role="partner")
    lanes = [
        ((0.0, LANE / 2), (-1.0, 0.0), math.pi, (-28.0, -8.0), (6.0, 10.0)),
        ((0.0, -LANE / 2), (1.0, 0.0), 0.0, (10.0, 26.0), (6.0, 10.0)),
        ((LANE / 2, 0.0), (0.0, 1.0), _HALF_PI, (10.0, 24.0), (5.0, 9.0)),
    ]
    _add_background(b, rng, lanes, int(rng.integers(1, 3)), avoid_segments=[(3, threat), (ego, 1)])
    return [(0.0, 0.0)], [(LANE / 2, -9.0), (LANE / 2, 0.0), (-8.0, LANE / 2), (-30.0, LANE / 2)]


def _intersection(b: _Builder, rng):
    j = lambda s: float(rng.uniform(-s, s))
    ego = b.add((LANE / 2, -14.0 + j(1.0)), (0.0, rng.uniform(4.0, 6.0)), _HALF_PI, connected=True, role="ego")
    b.add((7.0, -6.5 + j(0.5)), (0.0, 0.0), 0.0, length=9.0, width=2.6, height=3.2, role="occluder")
    threat = b.add((22.0 + j(1.5), LANE / 2), (-rng.uniform(9.0, 12.0), 0.0), math.pi, role="threat")
    b.add((LANE / 2 + 2.0, 14.0 + j(1.0)), (0.0, 0.0), -_HALF_PI, connected=True, role="partner")
    lanes = [
        ((0.0, -LANE / 2), (1.0, 0.0), 0.0, (-26.0, -8.0), (6.0, 10.0)),
        ((-LANE / 2, 0.0), (0.0, -1.0), -_HALF_PI, (8.0, 24.0), (5.0, 9.0)),
    ]
    _add_background(b, rng, lanes, int(rng.integers(1, 3)), avoid_segments=[(3, threat), (ego, 1)])
    return [(0.0, 0.0)], [(LANE / 2, -14.0), (LANE / 2, 30.0)]


def _merge(b: _Builder, rng):
    j = lambda s: float(rng.uniform(-s, s))
    v = rng.uniform(12.0, 15.0)
    ego = b.add((-12.0 + j(1.0), LANE / 2), (v, 0.0), 0.0, connected=True, role="ego")
    b.add((-2.0 + j(1.0), -LANE / 2), (v, 0.0), 0.0, length=10.0, width=2.6, height=3.4, role="occluder")
    # on-ramp joins from the south-east at roughly 20 degrees
    ang = math.radians(20.0)
    speed = v + rng.uniform(1.0, 3.0)
    threat_vel = (speed * math.cos(ang), speed * math.sin(ang))
    threat = b.add((12.0 + j(1.0), -10.0 + j(0.5)), threat_vel, 0.0, role="threat")
    b.add((22.0 + j(1.0), -LANE / 2), (v * 0.8, 0.0), 0.0, connected=True, role="partner")
    lanes = [((0.0, LANE / 2), (1.0, 0.0), 0.0, (8.0, 26.0), (v - 1.0, v + 1.0))]
    _add_background(b, rng, lanes, 1, avoid_segments=[(3, threat), (ego, 1)])
    return [(24.0, -LANE / 2)], [(-12.0, LANE / 2), (30.0, LANE / 2)]


def _head_on(b: _Builder, rng):
    j = lambda s: float(rng.uniform(-s, s))
    v = rng.uniform(8.0, 10.0)
    ego = b.add((-14.0 + j(1.0), -LANE / 2), (v, 0.0), 0.0, connected=True, role="ego")
    b.add((-2.0 + j(0.5), -LANE / 2), (v, 0.0), 0.0, length=9.0, width=2.6, height=3.2, role="occluder")
    # oncoming car drifting over the centre line, hidden behind the lead truck
    threat = b.add((20.0 + j(1.0), 1.0), (-rng.uniform(9.0, 12.0), -0.6), math.pi, role="threat")
    b.add((22.0 + j(1.0), -LANE / 2), (v, 0.0), 0.0, connected=True, role="partner")
    lanes = [((0.0, LANE / 2), (-1.0, 0.0), math.pi, (-26.0, -12.0), (8.0, 11.0))]
    _add_background(b, rng, lanes, 1, avoid_segments=[(3, threat), (ego, 1)])
    return [], [(-14.0, -LANE / 2), (30.0, -LANE / 2)]


def _overtake(b: _Builder, rng):
    j = lambda s: float(rng.uniform(-s, s))
    v = rng.uniform(9.0, 11.0)
    ego = b.add((-14.0 + j(0.5), -LANE / 2 + 0.4), (v, 0.0), 0.0, connected=True, role="ego")
    b.add((-5.0 + j(0.5), -LANE / 2), (v, 0.0), 0.0, length=10.0, width=2.6, height=3.4, role="occluder")
    threat = b.add((22.0 + j(1.0), LANE / 2), (-rng.uniform(10.0, 13.0), 0.0), math.pi, role="threat")
    b.add((8.0 + j(0.5), -LANE / 2), (v, 0.0), 0.0, connected=True, role="partner")
    lanes = [((0.0, -LANE / 2), (1.0, 0.0), 0.0, (-30.0, -22.0), (v - 0.5, v + 0.5))]
    _add_background(b, rng, lanes, 1, avoid_segments=[(3, threat), (ego, 1)])
    return [], [(-14.0, -LANE / 2), (30.0, LANE / 2)]


def _straight(b: _Builder, rng):
    v = rng.uniform(10.0, 13.0)
    b.add((0.0, -LANE / 2), (v, 0.0), 0.0, connected=True, role="ego")
    b.add((-20.0 + rng.uniform(-1, 1), -LANE / 2), (v, 0.0), 0.0, connected=True, role="partner")
    b.add((22.0 + rng.uniform(-1, 1), -LANE / 2), (v, 0.0), 0.0, role="traffic")
    b.add((-17.0 + rng.uniform(-2, 2), -LANE * 2.5), (v, 0.0), 0.0, role="traffic")
    return [], [(0.0, -LANE / 2), (40.0, -LANE / 2)]


def _multi_agent(b: _Builder, rng):
    j = lambda s: float(rng.uniform(-s, s))
    ego = b.add((LANE / 2, -10.0 + j(1.0)), (0.0, rng.uniform(0.5, 1.5)), _HALF_PI, connected=True, role="ego")
    b.add((-LANE / 2, 8.0 + j(0.5)), (0.0, 0.0), _HALF_PI, length=9.0, width=2.6, height=3.2, role="occluder")
    t1 = b.add((-1.5 * LANE, 21.0 + j(1.0)), (0.0, -rng.uniform(10.0, 12.0)), -_HALF_PI, role="threat")
    b.add((7.0, -6.5 + j(0.5)), (0.0, 0.0), 0.0, length=9.0, width=2.6, height=3.2, role="occluder")
    t2 = b.add((22.0 + j(1.0), LANE / 2), (-rng.uniform(8.0, 10.0), 0.0), math.pi, role="threat")
    b.add((-12.0 + j(1.0), -LANE / 2), (0.0, 0.0), 0.0, connected=True, role="partner")
    b.add((LANE / 2 + 2.0, 15.0 + j(1.0)), (0.0, 0.0), -_HALF_PI, connected=True, role="partner")
    b.add((-LANE / 2, -22.0 + j(1.0)), (0.0, rng.uniform(0.0, 1.0)), _HALF_PI, connected=True, role="partner")
    _add_background(b, rng, [((0.0, -LANE / 2), (1.0, 0.0), 0.0, (-28.0, -16.0), (6.0, 9.0))], 1,
                    avoid_segments=[(5, t1), (6, t2)])
    return [(0.0, 0.0)], [(LANE / 2, -10.0), (LANE / 2, 0.0), (-8.0, LANE / 2), (-30.0, LANE / 2)]


_BUILDERS = {
    ScenarioKind.UnprotectedLeftTurn: _left_turn,
    ScenarioKind.Intersection: _intersection,
    ScenarioKind.Merge: _merge,
    ScenarioKind.HeadOn: _head_on,
    ScenarioKind.Overtake: _overtake,
    ScenarioKind.StraightBaseline: _straight,
    ScenarioKind.MultiAgent: _multi_agent,
}


def generate_scene(kind, seed: int, duration: int = 8, dt: float = 0.1) -> Scene:
    """Deterministic scene of the given kind.

    Object 0 is always the ego.  Kinds with an occlusion hazard carry one
    ``occluder`` and one or more ``threat`` objects; threats start hidden
    from the ego by the occluder while a ``partner`` agent sees them.
    """
    kind = ScenarioKind.parse(kind)
    if int(seed) != seed or seed < 0:
        raise ValidationError("seed must be a non-negative integer")
    if duration < 1 or dt <= 0:
        raise ValidationError("duration must be >= 1 and dt > 0")
    rng = np.random.default_rng([int(seed), list(ScenarioKind).index(kind)])
    b = _Builder(duration, dt)
    intersections, path = _BUILDERS[kind](b, rng)
    return Scene(kind, int(seed), tuple(b.tracks), tuple(intersections), 0, tuple(path), duration, dt)


# ---------------------------------------------------------------------------
# ray casting


def _segments(objects: Sequence[ObjectState]):
    starts, ends, owner = [], [], []
    for o in objects:
        c = o.corners()
        for k in range(4):
            starts.append(c[k])
            ends.append(c[(k + 1) % 4])
            owner.append(o.id)
    return np.array(starts).reshape(-1, 2), np.array(ends).reshape(-1, 2), np.array(owner, dtype=np.int64)


def ray_hits(origin, angles, objects: Sequence[ObjectState], max_range: float):
    """First-hit range and object id per ray (inf / -1 when nothing is hit)."""
    angles = np.asarray(angles, dtype=float)
    rng_out = np.full(len(angles), np.inf)
    ids = np.full(len(angles), -1, dtype=np.int64)
    if not objects or not len(angles):
        return rng_out, ids
    a, b, owner = _segments(objects)
    d = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (R, 2)
    e = b - a  # (S, 2)
    w = a - np.asarray(origin, dtype=float)  # (S, 2)
    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
        u = (w[None, :, 0] * d[:, None, 1] - w[None, :, 1] * d[:, None, 0]) / denom
    ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0) & (u <= 1) & (t <= max_range)
    t = np.where(ok, t, np.inf)
    k = np.argmin(t, axis=1)
    best = t[np.arange(len(angles)), k]
    hit = np.isfinite(best)
    rng_out[hit] = best[hit]
    ids[hit] = owner[k[hit]]
    return rng_out, ids


def ray_angles(fov: FovSpec, rays: int) -> np.ndarray:
    if fov.azimuth_span is None:
        return 2 * math.pi * np.arange(rays) / rays
    start, end = fov.azimuth_span
    span = (end - start) % (2 * math.pi) or 2 * math.pi
    return np.mod(start + span * np.arange(rays) / max(1, rays - 1), 2 * math.pi)


def raycast_points(
    scene: Scene,
    agent_id: int,
    frame: int,
    fov: FovSpec = FovSpec(),
    rays: int = DEFAULT_RAYS,
    seed: int = 0,
    jitter: float = DEFAULT_JITTER,
    return_ids: bool = False,
):
    """Simulated LiDAR returns (N, 3) in world coordinates for one agent.

    Rays are equiangular from the agent centre; each returns its first hit
    on another object's boundary within range, jittered along the ray by up
    to ``jitter`` metres, with z drawn inside the hit object's height
    (sensor-relative).
    """
    objs = scene.objects_at(frame)
    me = [o for o in objs if o.id == agent_id]
    if not me:
        raise ValidationError(f"agent {agent_id} not in scene")
    if not me[0].is_connected:
        raise ValidationError(f"agent {agent_id} is not connected")
    others = [o for o in objs if o.id != agent_id]
    origin = np.asarray(me[0].position)
    angles = ray_angles(fov, rays)
    r, ids = ray_hits(origin, angles, others, fov.max_range)
    hit = np.isfinite(r)
    rs = np.random.default_rng([int(seed), int(agent_id), int(frame)])
    noise = rs.uniform(-jitter, jitter, size=len(angles))
    zfrac = rs.uniform(0.0, 1.0, size=len(angles))
    heights = {o.id: o.height for o in others}
    rr = r[hit] + noise[hit]
    pts = np.empty((int(hit.sum()), 3))
    pts[:, 0] = origin[0] + rr * np.cos(angles[hit])
    pts[:, 1] = origin[1] + rr * np.sin(angles[hit])
    h = np.array([heights[i] for i in ids[hit]])
    pts[:, 2] = -SENSOR_HEIGHT + zfrac[hit] * h
    if return_ids:
        return pts, ids[hit]
    return pts

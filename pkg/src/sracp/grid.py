"""Bird's-eye-view grid geometry.

Occupancy rasterization, Beer-Lambert line-of-sight transmittance,
occlusion probability and temporally stabilized blind-zone masks.

Conventions
-----------
Every grid lives in an ego frame whose origin is the sensor.  Rows index
``y`` and columns index ``x``::

    cell (i, j) centre = (x_min + (j + 0.5) * cell_size,
                          y_min + (i + 0.5) * cell_size)

Flat cell indices are row-major, ``i * W + j``.
"""

from __future__ import annotations

import functools
import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np
from scipy import ndimage

from .errors import ValidationError

__all__ = [
    "GridSpec",
    "OccupancyField",
    "FovSpec",
    "RaycastParams",
    "BlindZoneMask",
    "Pose2D",
    "world_to_ego",
    "ego_to_world",
    "build_occupancy",
    "transmittance",
    "transmittance_map",
    "fov_gate",
    "occlusion_map",
    "warp_indices",
    "warp_values",
    "stabilize_blind_zone",
]

DEFAULT_LAMBDA = 2.0
DEFAULT_TAU_OCC = 0.5
DEFAULT_K_T = 3
DEFAULT_TAU_T = 0.5
DEFAULT_CELL_SIZE = 0.4


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell_size: float = DEFAULT_CELL_SIZE
    height_band: tuple[float, float] = (-3.0, 1.0)

    def __post_init__(self):
        vals = (self.x_min, self.x_max, self.y_min, self.y_max, self.cell_size, *self.height_band)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("grid bounds must be finite")
        if self.cell_size <= 0:
            raise ValidationError(f"cell_size must be positive, got {self.cell_size}")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValidationError("grid extent must satisfy x_max > x_min and y_max > y_min")
        if self.height_band[1] <= self.height_band[0]:
            raise ValidationError("height_band must satisfy z_max > z_min")

    @classmethod
    def centered(cls, half_extent: float, cell_size: float = DEFAULT_CELL_SIZE, **kw) -> "GridSpec":
        return cls(-half_extent, half_extent, -half_extent, half_extent, cell_size, **kw)

    @property
    def H(self) -> int:
        return int(math.ceil((self.y_max - self.y_min) / self.cell_size - 1e-9))

    @property
    def W(self) -> int:
        return int(math.ceil((self.x_max - self.x_min) / self.cell_size - 1e-9))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.H, self.W)

    @property
    def n_cells(self) -> int:
        return self.H * self.W

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) arrays of shape (H, W) holding cell-centre coordinates."""
        xs = self.x_min + (np.arange(self.W) + 0.5) * self.cell_size
        ys = self.y_min + (np.arange(self.H) + 0.5) * self.cell_size
        X, Y = np.meshgrid(xs, ys)
        return X, Y

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return (self.x_min + (j + 0.5) * self.cell_size, self.y_min + (i + 0.5) * self.cell_size)

    def locate(self, x, y):
        """Map metric coordinates to (row, col, inside) with floor semantics."""
        j = np.floor((np.asarray(x, dtype=float) - self.x_min) / self.cell_size).astype(np.int64)
        i = np.floor((np.asarray(y, dtype=float) - self.y_min) / self.cell_size).astype(np.int64)
        inside = (i >= 0) & (i < self.H) & (j >= 0) & (j < self.W)
        return i, j, inside

    def hash(self) -> int:
        """Stable 64-bit digest used to tag wire messages with their grid."""
        raw = struct.pack(
            "<7d", self.x_min, self.x_max, self.y_min, self.y_max, self.cell_size, *self.height_band
        )
        return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min,
            "x_max": self.x_max,
            "y_min": self.y_min,
            "y_max": self.y_max,
            "cell_size": self.cell_size,
            "height_band": list(self.height_band),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        if "height_band" in d:
            d["height_band"] = tuple(d["height_band"])
        return cls(**d)


def _check_shape(grid: GridSpec, arr: np.ndarray, what: str) -> None:
    if arr.shape != grid.shape:
        raise ValidationError(f"{what} has shape {arr.shape}, grid expects {grid.shape}")


@dataclass(frozen=True)
class OccupancyField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        _check_shape(self.grid, self.values, "occupancy")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValidationError("occupancy values must lie in [0, 1]")


@dataclass(frozen=True)
class FovSpec:
    """Sensor coverage: range limit plus an optional azimuth window.

    ``azimuth_span=None`` means a full circle.  A span ``(start, end)`` with
    ``start > end`` wraps through zero.
    """

    max_range: float = 60.0
    azimuth_span: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if not self.max_range > 0:
            raise ValidationError("max_range must be positive")
        if self.azimuth_span is not None:
            a, b = self.azimuth_span
            if not (0 <= a <= 2 * math.pi and 0 <= b <= 2 * math.pi):
                raise ValidationError("azimuth span must lie within [0, 2*pi]")


@dataclass(frozen=True)
class RaycastParams:
    lambda_attenuation: float = DEFAULT_LAMBDA
    step: float = DEFAULT_CELL_SIZE / 2

    def __post_init__(self):
        if not self.lambda_attenuation > 0:
            raise ValidationError("lambda_attenuation must be positive")
        if not self.step > 0:
            raise ValidationError("step must be positive")

    @classmethod
    def for_grid(cls, grid: GridSpec, lambda_attenuation: float = DEFAULT_LAMBDA) -> "RaycastParams":
        return cls(lambda_attenuation, grid.cell_size / 2)

    def check(self, grid: GridSpec) -> None:
        if self.step > grid.cell_size:
            raise ValidationError(
                f"ray step {self.step} exceeds cell size {grid.cell_size}; sampling would skip cells"
            )


@dataclass(frozen=True)
class BlindZoneMask:
    grid: GridSpec
    occluded: np.ndarray
    occ_prob: np.ndarray

    def __post_init__(self):
        _check_shape(self.grid, self.occluded, "occluded")
        _check_shape(self.grid, self.occ_prob, "occ_prob")


def _wrap_angle(a: float) -> float:
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


@dataclass(frozen=True)
class Pose2D:
    translation: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))
        object.__setattr__(self, "rotation", _wrap_angle(float(self.rotation)))


def world_to_ego(point, ego_pose: Pose2D):
    """Rigid world->ego transform.  Accepts a single point or an (N, 2) array."""
    p = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValidationError("non-finite point")
    c, s = math.cos(ego_pose.rotation), math.sin(ego_pose.rotation)
    dx = p[..., 0] - ego_pose.translation[0]
    dy = p[..., 1] - ego_pose.translation[1]
    out = np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)
    return out


def ego_to_world(point, ego_pose: Pose2D):
    p = np.asarray(point, dtype=float)
    c, s = math.cos(ego_pose.rotation), math.sin(ego_pose.rotation)
    x = c * p[..., 0] - s * p[..., 1] + ego_pose.translation[0]
    y = s * p[..., 0] + c * p[..., 1] + ego_pose.translation[1]
    return np.stack([x, y], axis=-1)


def squash(a):
    return 1.0 - np.exp(-np.asarray(a, dtype=float))


def build_occupancy(
    points, ego_pose: Pose2D, grid: GridSpec, kernel_radius: int = 0
) -> OccupancyField:
    """Rasterize a world-frame point cloud into a [0, 1] occupancy field.

    Points outside the height band or the grid are dropped.  The whole band
    is one height bin, so per-cell counts are summed over it, smoothed with a
    ``(2r+1)^2`` box kernel and squashed with ``1 - exp(-a)``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValidationError("point coordinates must be finite")
    if kernel_radius < 0:
        raise ValidationError("kernel_radius must be >= 0")
    counts = np.zeros(grid.shape)
    if len(pts):
        z_lo, z_hi = grid.height_band
        pts = pts[(pts[:, 2] >= z_lo) & (pts[:, 2] <= z_hi)]
    if len(pts):
        xy = world_to_ego(pts[:, :2], ego_pose)
        i, j, inside = grid.locate(xy[:, 0], xy[:, 1])
        np.add.at(counts, (i[inside], j[inside]), 1.0)
    if kernel_radius > 0:
        k = np.ones((2 * kernel_radius + 1,) * 2)
        counts = ndimage.convolve(counts, k, mode="constant", cval=0.0)
    return OccupancyField(grid, squash(counts))


@numba.njit(cache=True)
def _depth_kernel(flat, H, W, x_min, y_min, cs, targets, step):  # pragma: no cover - compiled
    out = np.zeros(targets.shape[0])
    for n in range(targets.shape[0]):
        t = targets[n]
        ti = t // W
        tj = t - ti * W
        cx = x_min + (tj + 0.5) * cs
        cy = y_min + (ti + 0.5) * cs
        r = math.hypot(cx, cy)
        if r > 0:
            ux = cx / r
            uy = cy / r
        else:
            ux = cx
            uy = cy
        K = int(math.floor(r / step))
        acc = 0.0
        for k in range(K + 1):
            s = k * step
            jj = int(math.floor((s * ux - x_min) / cs))
            ii = int(math.floor((s * uy - y_min) / cs))
            if ii < 0 or ii >= H or jj < 0 or jj >= W:
                continue
            idx = ii * W + jj
            if idx == t:
                continue
            acc += flat[idx]
        out[n] = acc
    return out


def _optical_depths(values: np.ndarray, grid: GridSpec, targets: np.ndarray, step: float) -> np.ndarray:
    """Sum of sampled occupancy along the ray from the origin to each target cell.

    ``targets`` are flat indices.  Samples sit at ``s = k * step`` for
    ``k = 0..floor(r / step)``; samples landing in the target cell or outside
    the grid contribute nothing.  Summation runs from the sensor outwards.
    """
    flat = np.ascontiguousarray(values, dtype=np.float64).ravel()
    H, W = grid.shape
    return _depth_kernel(flat, H, W, float(grid.x_min), float(grid.y_min), float(grid.cell_size),
                         np.ascontiguousarray(targets, dtype=np.int64), float(step))


def transmittance(field: OccupancyField, target_cell: tuple[int, int], params: RaycastParams) -> float:
    """Line-of-sight transmittance from the grid origin to one cell centre."""
    grid = field.grid
    i, j = target_cell
    if not (0 <= i < grid.H and 0 <= j < grid.W):
        raise ValidationError(f"target cell {target_cell} outside grid {grid.shape}")
    depth = _optical_depths(field.values, grid, np.array([i * grid.W + j]), params.step)[0]
    return float(math.exp(-params.lambda_attenuation * params.step * depth))


def transmittance_map(field: OccupancyField, params: RaycastParams, where: Optional[np.ndarray] = None) -> np.ndarray:
    """Transmittance for every cell (or only where ``where`` is true; 1 elsewhere)."""
    grid = field.grid
    params.check(grid)
    T = np.ones(grid.shape)
    targets = np.flatnonzero(np.ones(grid.shape, bool) if where is None else where)
    if len(targets):
        depth = _optical_depths(field.values, grid, targets, params.step)
        T.ravel()[targets] = np.exp(-params.lambda_attenuation * params.step * depth)
    return T


def fov_gate(grid: GridSpec, fov: FovSpec) -> np.ndarray:
    """Boolean (H, W) array: cell centre within range and azimuth window."""
    X, Y = grid.cell_centers()
    gate = np.hypot(X, Y) <= fov.max_range
    if fov.azimuth_span is not None:
        start, end = fov.azimuth_span
        az = np.mod(np.arctan2(Y, X), 2 * math.pi)
        if start <= end:
            gate &= (az >= start) & (az <= end)
        else:
            gate &= (az >= start) | (az <= end)
    return gate


def occlusion_map(
    field: OccupancyField, fov: FovSpec, params: RaycastParams, tau_occ: float = DEFAULT_TAU_OCC
) -> BlindZoneMask:
    """Occlusion probability ``1 - chi_fov * T`` and its thresholded mask."""
    if not 0 < tau_occ < 1:
        raise ValidationError("tau_occ must lie in (0, 1)")
    chi = fov_gate(field.grid, fov)
    T = transmittance_map(field, params, where=chi)
    p = np.where(chi, 1.0 - T, 1.0)
    return BlindZoneMask(field.grid, p > tau_occ, p)


def warp_indices(
    src_grid: GridSpec, src_pose: Pose2D, dst_grid: GridSpec, dst_pose: Pose2D
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-cell lookup from destination cells into a source grid.

    Returns ``(flat_src_index, valid)`` arrays of shape ``dst_grid.shape``;
    ``valid`` is false where the destination cell centre falls outside the
    source grid.  Results are memoized and read-only.
    """
    return _warp_indices_cached(src_grid, src_pose, dst_grid, dst_pose)


@functools.lru_cache(maxsize=4096)
def _warp_indices_cached(src_grid, src_pose, dst_grid, dst_pose):
    X, Y = dst_grid.cell_centers()
    world = ego_to_world(np.stack([X, Y], axis=-1), dst_pose)
    local = world_to_ego(world, src_pose)
    i, j, inside = src_grid.locate(local[..., 0], local[..., 1])
    idx = np.where(inside, i * src_grid.W + j, 0)
    idx.setflags(write=False)
    inside.setflags(write=False)
    return idx, inside


def warp_values(values: np.ndarray, src_grid, src_pose, dst_grid, dst_pose, fill=0.0) -> np.ndarray:
    """Resample a (..., H, W) array from one ego frame into another."""
    idx, valid = warp_indices(src_grid, src_pose, dst_grid, dst_pose)
    lead = values.shape[:-2]
    flat = values.reshape(lead + (-1,))
    out = flat[..., idx]
    return np.where(valid, out, fill)


def stabilize_blind_zone(
    history: Sequence[tuple[BlindZoneMask, Pose2D]], current_pose: Pose2D, tau_t: float = DEFAULT_TAU_T
) -> BlindZoneMask:
    """Vote over the last K_t blind masks warped into the current frame.

    ``history`` runs oldest to newest.  Cells that map outside a past grid
    vote occluded.  The returned ``occ_prob`` is the newest frame's, warped.
    """
    if not history:
        raise ValidationError("stabilization needs at least one frame of history")
    grid = history[-1][0].grid
    if any(m.grid != grid for m, _ in history):
        raise ValidationError("all history masks must share one GridSpec")
    if not 0 < tau_t < 1:
        raise ValidationError("tau_t must lie in (0, 1)")
    votes = np.zeros(grid.shape)
    for mask, pose in history:
        votes += warp_values(mask.occluded.astype(float), grid, pose, grid, current_pose, fill=1.0)
    frac = votes / len(history)
    newest, newest_pose = history[-1]
    p = warp_values(newest.occ_prob, grid, newest_pose, grid, current_pose, fill=1.0)
    return BlindZoneMask(grid, frac > tau_t, p)

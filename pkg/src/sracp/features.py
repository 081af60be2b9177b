"""Surrogate BEV feature tensors.

A learned pillar encoder is replaced by a fixed per-cell layout:

* channel 0 -- occupancy
* channel 1 -- cell risk
* channel 2 -- occlusion probability
* channels 3..C-1 -- sinusoidal expansions of those three statistics

Cells without any LiDAR return are empty pillars and carry the zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .grid import GridSpec, Pose2D, warp_values

__all__ = ["FeatureField", "surrogate_features", "surrogate_vectors", "expansion_plan"]

OCC, RISK, OCC_PROB = 0, 1, 2


@dataclass(frozen=True)
class FeatureField:
    grid: GridSpec
    values: np.ndarray  # (C, H, W)

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[1:] != self.grid.shape:
            raise ValidationError(f"feature values {self.values.shape} do not match grid {self.grid.shape}")

    @property
    def C(self) -> int:
        return self.values.shape[0]

    @property
    def occupancy(self) -> np.ndarray:
        return self.values[OCC]

    def warp(self, src_pose: Pose2D, dst_grid: GridSpec, dst_pose: Pose2D) -> "FeatureField":
        return FeatureField(dst_grid, warp_values(self.values, self.grid, src_pose, dst_grid, dst_pose, fill=0.0))

    def nonzero_cells(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.values != 0, axis=0))


def expansion_plan(C: int) -> list[tuple[int, int]]:
    """(base channel, frequency) for channels 3..C-1."""
    return [(m % 3, m // 3 + 1) for m in range(max(0, C - 3))]


def surrogate_vectors(base, C: int = 64) -> np.ndarray:
    """Expand (3, n) base statistics into (C, n) feature vectors."""
    if C < 3:
        raise ValidationError("surrogate layout needs at least 3 channels")
    base = np.clip(np.asarray(base, dtype=float), 0.0, 1.0)
    out = np.empty((C,) + base.shape[1:])
    out[:3] = base
    for c, (b, freq) in enumerate(expansion_plan(C), start=3):
        out[c] = 0.5 * (1.0 - np.cos(np.pi * freq * base[b]))
    out[:, base[OCC] <= 0] = 0.0
    return out


def surrogate_features(grid: GridSpec, occupancy, risk, occ_prob, C: int = 64) -> FeatureField:
    base = np.stack([np.asarray(occupancy, float), np.asarray(risk, float), np.asarray(occ_prob, float)])
    return FeatureField(grid, surrogate_vectors(base, C))

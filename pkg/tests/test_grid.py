from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sracp.errors import ValidationError
from sracp.grid import (
    BlindZoneMask,
    FovSpec,
    GridSpec,
    OccupancyField,
    Pose2D,
    RaycastParams,
    build_occupancy,
    occlusion_map,
    stabilize_blind_zone,
    transmittance,
    transmittance_map,
    world_to_ego,
)

from oracles import oracle_T, ray_samples


SMALL = GridSpec.centered(4.0, 0.5)  # 16 x 16


# --- GridSpec / Pose2D ------------------------------------------------------------


def test_grid_shape_uses_ceiling():
    g = GridSpec(0.0, 10.1, 0.0, 5.0, 1.0)
    assert g.shape == (5, 11)
    assert GridSpec.centered(32.0).shape == (160, 160)


@pytest.mark.parametrize(
    "kw",
    [dict(cell_size=0.0), dict(x_max=-10.0), dict(y_max=-10.0), dict(height_band=(1.0, 1.0))],
)
def test_grid_rejects_invalid(kw):
    base = dict(x_min=-1.0, x_max=1.0, y_min=-1.0, y_max=1.0, cell_size=0.5)
    base.update(kw)
    with pytest.raises(ValidationError):
        GridSpec(**base)


def test_pose_rotation_normalized():
    assert Pose2D((0, 0), 3 * math.pi).rotation == pytest.approx(math.pi)
    assert Pose2D((0, 0), -math.pi).rotation == pytest.approx(math.pi)


def test_world_to_ego_examples():
    assert np.allclose(world_to_ego((3.0, -2.0), Pose2D()), (3.0, -2.0))
    assert np.allclose(world_to_ego((5.0, 0.0), Pose2D((5.0, 0.0))), (0.0, 0.0))
    assert np.allclose(world_to_ego((1.0, 0.0), Pose2D((0.0, 0.0), math.pi / 2)), (0.0, -1.0))


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-3.1, 3.1))
def test_world_to_ego_maps_pose_to_origin(x, y, th):
    assert np.allclose(world_to_ego((x, y), Pose2D((x, y), th)), (0.0, 0.0), atol=1e-9)


# --- build_occupancy ---------------------------------------------------------------


def test_occupancy_empty_is_zero():
    assert not build_occupancy(np.zeros((0, 3)), Pose2D(), SMALL).values.any()


def test_occupancy_single_point():
    occ = build_occupancy([(0.1, 0.1, 0.0)], Pose2D(), SMALL).values
    i, j, _ = SMALL.locate(0.1, 0.1)
    assert occ[i, j] == pytest.approx(1 - math.exp(-1))
    assert np.count_nonzero(occ) == 1


def test_occupancy_height_band_filter():
    assert not build_occupancy([(0.1, 0.1, 5.0)], Pose2D(), SMALL).values.any()


def test_occupancy_rejects_non_finite():
    with pytest.raises(ValidationError):
        build_occupancy([(float("nan"), 0.0, 0.0)], Pose2D(), SMALL)


def test_occupancy_box_kernel_spreads_mass():
    occ = build_occupancy([(0.1, 0.1, 0.0)], Pose2D(), SMALL, kernel_radius=1).values
    assert np.count_nonzero(occ) == 9


# --- transmittance --------------------------------------------------------------------


def test_transmittance_empty_field_is_one():
    field = OccupancyField(SMALL, np.zeros(SMALL.shape))
    assert np.all(transmittance_map(field, RaycastParams.for_grid(SMALL)) == 1.0)


def test_transmittance_formula_example():
    # two samples of 1.0 on the ray, lambda=1, step=0.5 -> exp(-1)
    g = GridSpec(-0.5, 3.5, -0.5, 0.5, 1.0)
    vals = np.zeros(g.shape)
    vals[0, 1] = 1.0  # cell spanning x in [0.5, 1.5): samples s=0.5 and s=1.0
    T = transmittance(OccupancyField(g, vals), (0, 3), RaycastParams(1.0, 0.5))
    assert T == pytest.approx(math.exp(-1.0), rel=1e-12)


def test_transmittance_opaque_limit():
    g = GridSpec(-0.5, 100.5, -0.5, 0.5, 1.0)
    T = transmittance(OccupancyField(g, np.ones(g.shape)), (0, 100), RaycastParams(1.0, 0.5))
    assert T < 1e-40


def test_transmittance_rejects_outside_cell():
    with pytest.raises(ValidationError):
        transmittance(OccupancyField(SMALL, np.zeros(SMALL.shape)), (99, 0), RaycastParams())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 32))
def test_transmittance_matches_oracle(seed, n):
    rng = np.random.default_rng(seed)
    g = GridSpec.centered(n * 0.25, 0.5)
    vals = rng.random(g.shape) * (rng.random(g.shape) < 0.3)
    params = RaycastParams(2.0, 0.25)
    T = transmittance_map(OccupancyField(g, vals), params)
    for i in range(g.H):
        for j in range(g.W):
            assert T[i, j] == pytest.approx(oracle_T(vals, g, i, j, params), rel=1e-6, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_transmittance_beer_lambert_composes(seed):
    rng = np.random.default_rng(seed)
    vals = rng.random(SMALL.shape)
    params = RaycastParams(1.5, 0.25)
    i, j = int(rng.integers(SMALL.H)), int(rng.integers(SMALL.W))
    samples = ray_samples(SMALL, i, j, params.step)
    cut = int(rng.integers(0, len(samples) + 1))
    lam = params.lambda_attenuation * params.step
    first = math.exp(-lam * sum(vals[a, b] for a, b in samples[:cut]))
    second = math.exp(-lam * sum(vals[a, b] for a, b in samples[cut:]))
    T = transmittance(OccupancyField(SMALL, vals), (i, j), params)
    assert T == pytest.approx(first * second, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_transmittance_monotone_in_mass(seed, extra):
    rng = np.random.default_rng(seed)
    vals = rng.random(SMALL.shape) * 0.5
    more = vals.copy()
    a, b = int(rng.integers(SMALL.H)), int(rng.integers(SMALL.W))
    more[a, b] = min(1.0, more[a, b] + extra)
    params = RaycastParams.for_grid(SMALL)
    T0 = transmittance_map(OccupancyField(SMALL, vals), params)
    T1 = transmittance_map(OccupancyField(SMALL, more), params)
    assert np.all(T1 <= T0 + 1e-15)


def test_target_cell_does_not_occlude_itself():
    vals = np.zeros(SMALL.shape)
    i, j, _ = SMALL.locate(3.0, 0.1)
    vals[i, j] = 1.0
    assert transmittance(OccupancyField(SMALL, vals), (int(i), int(j)), RaycastParams.for_grid(SMALL)) == 1.0


def test_ray_step_larger_than_cell_rejected():
    with pytest.raises(ValidationError):
        transmittance_map(OccupancyField(SMALL, np.zeros(SMALL.shape)), RaycastParams(1.0, 1.0))


# --- occlusion_map --------------------------------------------------------------------


def test_occlusion_beyond_range_and_empty_field():
    g = GridSpec.centered(8.0, 0.5)
    bz = occlusion_map(OccupancyField(g, np.zeros(g.shape)), FovSpec(max_range=4.0), RaycastParams.for_grid(g))
    X, Y = g.cell_centers()
    far = np.hypot(X, Y) > 4.0
    assert np.all(bz.occ_prob[far] == 1.0) and np.all(bz.occluded[far])
    assert np.all(bz.occ_prob[~far] == 0.0) and not bz.occluded[~far].any()


def test_occlusion_probability_is_one_minus_T():
    g = GridSpec(-0.5, 3.5, -0.5, 0.5, 1.0)
    vals = np.zeros(g.shape)
    vals[0, 1] = 1.0
    bz = occlusion_map(OccupancyField(g, vals), FovSpec(10.0), RaycastParams(1.0, 0.5), tau_occ=0.5)
    assert bz.occ_prob[0, 3] == pytest.approx(1 - math.exp(-1.0))
    assert bz.occluded[0, 3]


def test_occlusion_azimuth_window():
    g = GridSpec.centered(4.0, 0.5)
    bz = occlusion_map(OccupancyField(g, np.zeros(g.shape)), FovSpec(10.0, (0.0, math.pi)),
                       RaycastParams.for_grid(g))
    X, Y = g.cell_centers()
    assert np.all(bz.occ_prob[Y < 0] == 1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_occlusion_properties(seed, tau):
    rng = np.random.default_rng(seed)
    vals = rng.random(SMALL.shape) * (rng.random(SMALL.shape) < 0.2)
    fov = FovSpec(3.0, (0.5, 4.0))
    bz = occlusion_map(OccupancyField(SMALL, vals), fov, RaycastParams.for_grid(SMALL), tau)
    assert bz.occ_prob.min() >= 0 and bz.occ_prob.max() <= 1
    assert np.array_equal(bz.occluded, bz.occ_prob > tau)
    from sracp.grid import fov_gate

    assert np.all(bz.occ_prob[~fov_gate(SMALL, fov)] == 1.0)


# --- stabilize_blind_zone ---------------------------------------------------------------


def _mask(occ):
    occ = np.asarray(occ, bool)
    return BlindZoneMask(SMALL, occ, occ.astype(float))


def test_stabilize_single_frame_identity():
    occ = np.random.default_rng(0).random(SMALL.shape) < 0.4
    out = stabilize_blind_zone([(_mask(occ), Pose2D())], Pose2D(), 0.5)
    assert np.array_equal(out.occluded, occ)


def test_stabilize_vote_counting():
    a = np.zeros(SMALL.shape, bool)
    b = a.copy()
    a[3, 3] = True
    b[3, 3] = True
    two_of_three = stabilize_blind_zone([(_mask(a), Pose2D()), (_mask(b), Pose2D()), (_mask(np.zeros_like(a)), Pose2D())],
                                        Pose2D(), 0.5)
    one_of_three = stabilize_blind_zone([(_mask(a), Pose2D()), (_mask(np.zeros_like(a)), Pose2D()),
                                         (_mask(np.zeros_like(a)), Pose2D())], Pose2D(), 0.5)
    assert two_of_three.occluded[3, 3]
    assert not one_of_three.occluded[3, 3]


def test_stabilize_empty_history_rejected():
    with pytest.raises(ValidationError):
        stabilize_blind_zone([], Pose2D(), 0.5)


def test_stabilize_out_of_grid_counts_occluded():
    empty = _mask(np.zeros(SMALL.shape, bool))
    # the past frame sat 2 m to the left, so the rightmost columns were never in its grid
    out = stabilize_blind_zone([(empty, Pose2D((-2.0, 0.0)))], Pose2D((0.0, 0.0)), 0.5)
    assert out.occluded[:, -1].all()
    assert not out.occluded[:, 0].any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99), st.integers(1, 4))
def test_stabilize_warp_consistency(seed, tau, k):
    occ = np.random.default_rng(seed).random(SMALL.shape) < 0.5
    pose = Pose2D((1.3, -0.7))
    out = stabilize_blind_zone([(_mask(occ), pose)] * k, pose, tau)
    assert np.array_equal(out.occluded, occ)

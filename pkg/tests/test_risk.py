from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Point, Polygon

from sracp.errors import ValidationError
from sracp.grid import GridSpec, Pose2D, world_to_ego
from sracp.risk import (
    ObjectState,
    RiskMatrix,
    RiskWeights,
    dangerous_set,
    distance_risk,
    intersection_risk,
    pairwise_risk_matrix,
    rasterize_risk_map,
    risk_labels,
    speed_risk,
    total_risk,
)

W = RiskWeights()
coord = st.floats(-200, 200, allow_nan=False)
speed = st.floats(-30, 30, allow_nan=False)


def obj(i, x=0.0, y=0.0, vx=0.0, vy=0.0, **kw):
    return ObjectState(i, (x, y), (vx, vy), **kw)


# --- scalar components ------------------------------------------------------------------


def test_distance_risk_examples():
    assert distance_risk((1, 2), (1, 2), 0.05) == 1.0
    assert distance_risk((20, 0), (0, 0), 0.05) == pytest.approx(math.exp(-1))
    assert distance_risk((1e6, 0), (0, 0), 0.05) < 1e-300


def test_speed_risk_examples():
    ego = obj(0, vx=5.0)
    same = obj(1, vx=5.0)
    assert speed_risk(same, ego, [same], 0.01) == 0.0
    fast = obj(2, vx=15.0)
    assert speed_risk(fast, ego, [same, fast], 0.01) == pytest.approx(10 / 10.01)
    still = [obj(i) for i in range(3)]
    assert all(speed_risk(o, obj(9), still, 0.01) == 0.0 for o in still)


def test_intersection_risk_examples():
    assert intersection_risk((3, 4), [(3, 4)], 0.02) == 1.0
    assert intersection_risk((0, 0), [(50, 0), (0, 80)], 0.02) == pytest.approx(math.exp(-1))
    assert intersection_risk((0, 0), [], 0.02) == 0.0


def test_total_risk_examples():
    assert total_risk((1, 1, 1), W) == pytest.approx(1.0)
    e = math.exp(-1)
    assert total_risk((e, 0, e), W) == pytest.approx(0.5 * e + 0.2 * e)
    assert total_risk((1.2, 1.2, 1.2), W) == 1.0


def test_weights_validation():
    with pytest.raises(ValidationError):
        RiskWeights(alpha_d=-0.1)
    with pytest.raises(ValidationError):
        RiskWeights(epsilon=0.0)


def test_object_validation():
    with pytest.raises(ValidationError):
        ObjectState(1, (0, 0), length=0.0)
    with pytest.raises(ValidationError):
        ObjectState(1, (float("inf"), 0))


@given(coord, coord, coord, coord, st.floats(0, 1), st.floats(0, 1))
def test_components_bounded(x, y, qx, qy, ld, ln):
    d = distance_risk((x, y), (qx, qy), ld)
    n = intersection_risk((x, y), [(qx, qy)], ln)
    assert 0 <= d <= 1 and 0 <= n <= 1


@given(st.floats(0, 100), st.floats(0, 100), st.floats(1e-3, 1))
def test_distance_and_intersection_strictly_decreasing(d1, gap, lam):
    d2 = d1 + gap + 1e-3
    if math.exp(-lam * d1) > 1e-300:
        assert distance_risk((d2, 0), (0, 0), lam) < distance_risk((d1, 0), (0, 0), lam)
        assert intersection_risk((d2, 0), [(0, 0)], lam) < intersection_risk((d1, 0), [(0, 0)], lam)


@given(st.lists(st.tuples(speed, speed), min_size=1, max_size=6), speed, speed, speed, speed)
def test_speed_risk_galilean_invariance(vels, evx, evy, cx, cy):
    objs = [obj(i + 1, vx=a, vy=b) for i, (a, b) in enumerate(vels)]
    ego = obj(0, vx=evx, vy=evy)
    shifted = [obj(o.id, vx=o.velocity[0] + cx, vy=o.velocity[1] + cy) for o in objs]
    ego2 = obj(0, vx=evx + cx, vy=evy + cy)
    for a, b in zip(objs, shifted):
        r1 = speed_risk(a, ego, objs, 0.01)
        assert 0 <= r1 < 1
        assert speed_risk(b, ego2, shifted, 0.01) == pytest.approx(r1, abs=1e-9)


@given(st.tuples(*[st.floats(0, 2)] * 3), st.integers(0, 2), st.floats(0, 1))
def test_total_risk_monotone(comps, k, bump):
    up = list(comps)
    up[k] += bump
    assert total_risk(tuple(up), W) >= total_risk(comps, W)
    assert 0 <= total_risk(comps, W) <= 1


# --- matrix and dangerous set ---------------------------------------------------------------


def test_pairwise_matrix_examples():
    ego = obj(0)
    assert pairwise_risk_matrix(ego, [], [], W).entries == ()
    m = pairwise_risk_matrix(ego, [obj(5)], [], W)
    assert m.entries == ((5, pytest.approx(0.5)),)


@given(st.lists(st.tuples(coord, coord, speed, speed), min_size=1, max_size=8))
def test_pairwise_matrix_bounded_and_ordered(rows):
    ego = obj(0, 1.0, 2.0, 3.0, 0.0)
    nbrs = [obj(10 - i, x, y, vx, vy) for i, (x, y, vx, vy) in enumerate(rows)]
    m = pairwise_risk_matrix(ego, nbrs, [(0.0, 0.0)], W)
    ids = [i for i, _ in m.entries]
    assert ids == sorted(ids)
    assert all(0 <= r <= 1 for _, r in m.entries)


def test_dangerous_set_examples():
    m = RiskMatrix(0, ((1, 0.8), (2, 0.3)))
    assert dangerous_set(m, 0.5) == {1}
    assert dangerous_set(m, 1.0) == set()
    assert dangerous_set(m, 0.0) == {1, 2}
    with pytest.raises(ValidationError):
        dangerous_set(m, 1.5)


@given(st.lists(st.floats(0, 1), max_size=10), st.floats(0, 1), st.floats(0, 1))
def test_dangerous_set_shrinks(risks, t1, t2):
    lo, hi = sorted((t1, t2))
    m = RiskMatrix(0, tuple(enumerate(risks)))
    assert dangerous_set(m, hi) <= dangerous_set(m, lo)


# --- rasterization ----------------------------------------------------------------------------


def oracle_raster(objects, scores, grid, pose):
    out = np.zeros(grid.shape)
    for o in objects:
        corners = world_to_ego(o.corners(), pose)
        poly = Polygon(corners).buffer(1e-7)
        for i in range(grid.H):
            for j in range(grid.W):
                if poly.covers(Point(grid.cell_center(i, j))):
                    out[i, j] = max(out[i, j], scores[o.id])
    return out


def test_rasterize_examples():
    g = GridSpec.centered(4.0, 1.0)
    ego = obj(0, 0.0, 0.0)
    assert not rasterize_risk_map([], ego, [], W, g).values.any()
    # a 3 x 2 m box whose edges sit on cell edges covers exactly 3 x 2 = 6 cell centres
    box = obj(1, 0.5, 1.0, length=3.0, width=2.0)
    rm = rasterize_risk_map([box], ego, [], W, g, scores={1: 0.7})
    assert np.count_nonzero(rm.values) == 6 and set(np.unique(rm.values)) == {0.0, 0.7}
    other = obj(2, 1.5, 1.0, length=2.0, width=2.0)
    rm2 = rasterize_risk_map([box, other], ego, [], W, g, scores={1: 0.4, 2: 0.9})
    assert rm2.values[g.locate(1.5, 1.5)[0], g.locate(1.5, 1.5)[1]] == 0.9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rasterize_matches_point_in_box_oracle(seed):
    rng = np.random.default_rng(seed)
    g = GridSpec.centered(6.4, 0.4)  # 32 x 32
    ego = obj(0, float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)))
    objs = [obj(i, *rng.uniform(-6, 6, 2), length=float(rng.uniform(0.5, 5)), width=float(rng.uniform(0.5, 3)),
                yaw=float(rng.uniform(-math.pi, math.pi))) for i in range(1, 5)]
    scores = {o.id: float(rng.random()) for o in objs}
    pose = Pose2D(ego.position)
    got = rasterize_risk_map(objs, ego, [], W, g, scores=scores).values
    assert np.array_equal(got, oracle_raster(objs, scores, g, pose))


def test_risk_labels_exclude_ego():
    ego = obj(0)
    labels = risk_labels([ego, obj(1, 10.0), obj(2, 20.0, vx=3.0)], ego, [(0, 0)], W)
    assert set(labels) == {1, 2}
    assert all(0 <= v <= 1 for v in labels.values())

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sracp.fusion import DetectionBox
from sracp.metrics import (
    ap_from_ranked,
    average_precision,
    box_iou,
    iou_matrix,
    match_detections,
    pooled_risk_ap,
    risk_ap,
)

from oracles import aabb_iou, box, brute_force_ap, oracle_ap, random_instance


# --- IoU -------------------------------------------------------------------------------------------


def test_iou_examples():
    assert box_iou(box(0, 0), box(0.5, 0)) == pytest.approx(1 / 3)
    assert box_iou(box(0, 0), box(0, 0)) == pytest.approx(1.0)
    assert box_iou(box(0, 0), box(3, 0)) == 0.0
    assert box_iou(box(0, 0, 2, 2), box(0, 0, 2, 2, yaw=np.pi / 2)) == pytest.approx(1.0)
    assert iou_matrix([], [box(0, 0)]).shape == (0, 1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(0.2, 4), min_size=4, max_size=4))
def test_iou_matches_axis_aligned_oracle(c, s):
    a, b = box(c[0], c[1], s[0], s[1]), box(c[2], c[3], s[2], s[3])
    assert box_iou(a, b) == pytest.approx(aabb_iou(a, b), abs=1e-9)


# --- AP ----------------------------------------------------------------------------------------------


def test_hand_example():
    gts = [box(0, 0), box(10, 0)]
    dets = [box(0, 0, s=0.9), box(5, 5, s=0.8), box(10, 0, s=0.7)]
    assert average_precision(dets, gts, 0.5) == 5 / 6
    assert ap_from_ranked([0.9, 0.8, 0.7], [True, False, True], 2) == 5 / 6


def test_ap_edge_cases():
    assert average_precision([], [], 0.5) is None
    assert average_precision([], [box(0, 0)], 0.5) == 0.0
    assert average_precision([box(0, 0)], [box(0, 0)], 0.5) == pytest.approx(1.0)
    # a duplicate detection is a false positive after the first match
    assert match_detections([box(0, 0, s=0.9), box(0, 0, s=0.8)], [box(0, 0)], 0.5).tolist() == [0, -1]
    with pytest.raises(ValueError):
        match_detections([], [], 0.0)


def test_ap_matches_brute_force_on_500_instances():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for n in range(500):
        n_gt = int(rng.integers(1, 4))
        dets, gts = random_instance(rng, n_gt, int(rng.integers(0, 7 - n_gt)))
        for theta in (0.3, 0.5, 0.7):
            got = average_precision(dets, gts, theta)
            worst = max(worst, abs(got - brute_force_ap(dets, gts, theta)))
    assert worst <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.3, 0.5, 0.7]))
def test_ap_invariant_under_monotone_score_rescaling(seed, theta):
    dets, gts = random_instance(np.random.default_rng(seed), 3, 5)
    rescaled = [DetectionBox(d.center, d.length, d.width, d.yaw, d.score ** 3 / 2 + 0.1) for d in dets]
    a, b = average_precision(dets, gts, theta), average_precision(rescaled, gts, theta)
    assert 0.0 <= a <= 1.0 and a == pytest.approx(b, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), max_size=12), st.integers(1, 8))
def test_ap_from_ranked_matches_oracle(rows, n_pos):
    scores = [s for s, _ in rows]
    tp = [t for _, t in rows]
    if sum(tp) > n_pos:
        n_pos = sum(tp)
    assert ap_from_ranked(scores, tp, n_pos) == pytest.approx(oracle_ap(scores, tp, n_pos), abs=1e-12)


# --- Risk-AP ----------------------------------------------------------------------------------------


def test_risk_ap_examples():
    gts = [box(0, 0), box(10, 0)]
    dets = [box(0, 0, s=0.9), box(10, 0, s=0.8), box(5, 5, s=0.7)]
    # only the risky box counts; the hit on the harmless one is ignored
    assert risk_ap(dets, gts, [0.9, 0.1], 0.5, 0.4) == pytest.approx(1.0)
    assert risk_ap(dets, gts, [0.1, 0.9], 0.5, 0.4) == pytest.approx(1.0)
    assert risk_ap(dets, gts, [0.1, 0.1], 0.5, 0.4) is None
    assert risk_ap(dets[1:], gts, [0.9, 0.9], 0.5, 0.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        risk_ap(dets, gts, [0.5], 0.5, 0.4)


def test_pooled_ranks_across_frames():
    f1 = ([box(0, 0, s=0.9)], [box(0, 0)], [0.9])
    f2 = ([box(5, 5, s=0.95)], [box(0, 0)], [0.9])
    # ranked jointly: FP (0.95) then TP (0.9) out of 2 positives
    assert pooled_risk_ap([f1, f2], 0.5, 0.4) == pytest.approx(0.25)
    assert pooled_risk_ap([], 0.5, 0.4) is None


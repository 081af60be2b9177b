"""Box overlap and average-precision metrics.

AP uses all-point interpolation: the precision envelope (running maximum
from the high-recall end) integrated over recall.  Matching is greedy in
descending score order.  Each detection claims the still-unmatched
ground-truth box of highest IoU above the threshold, and each ground-truth
box is matched at most once.

Risk-AP restricts the positives to ground truth whose risk label exceeds
``tau``.  Detections that match a filtered-out box are ignored (neither TP
nor FP).
"""

from __future__ import annotations

from collections import Counter
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
import shapely

from .fusion import DetectionBox

__all__ = [
    "box_iou",
    "iou_matrix",
    "match_detections",
    "ap_from_ranked",
    "average_precision",
    "risk_ap",
    "pooled_risk_ap",
]


def _as_box(b) -> DetectionBox:
    return b if isinstance(b, DetectionBox) else DetectionBox.from_dict(b)


def _polygons(boxes):
    if not boxes:
        return np.empty(0, dtype=object)
    return shapely.polygons(np.stack([_as_box(b).corners() for b in boxes]))


def box_iou(a, b) -> float:
    return float(iou_matrix([a], [b])[0, 0])


def iou_matrix(dets: Sequence, gts: Sequence) -> np.ndarray:
    """(len(dets), len(gts)) BEV polygon IoU."""
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    P = _polygons(dets)[:, None]
    G = _polygons(gts)[None, :]
    inter = shapely.area(shapely.intersection(P, G))
    union = shapely.area(P) + shapely.area(G) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return np.clip(iou, 0.0, 1.0)


def _score(b) -> float:
    return _as_box(b).score


def match_detections(dets: Sequence, gts: Sequence, theta: float) -> np.ndarray:
    """Index of the matched GT per detection (-1 when unmatched), greedy by score."""
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    iou = iou_matrix(list(dets), list(gts))
    order = sorted(range(len(dets)), key=lambda k: -_score(dets[k]))
    taken = np.zeros(len(gts), bool)
    out = np.full(len(dets), -1, dtype=np.int64)
    for k in order:
        if not len(gts):
            break
        cand = np.where(taken | (iou[k] <= theta), -1.0, iou[k])
        g = int(np.argmax(cand))
        if cand[g] > 0:
            out[k] = g
            taken[g] = True
    return out


def ap_from_ranked(scores: Sequence[float], tp: Sequence[bool], n_pos: int) -> Optional[float]:
    """All-point interpolated AP from per-detection scores and TP flags.

    Equal scores keep their given order.  Returns None when ``n_pos`` is 0.
    """
    if n_pos <= 0:
        return None
    scores = np.asarray(scores, dtype=float)
    tp = np.asarray(tp, dtype=bool)
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    # Exact rational arithmetic: every precision is hits/rank, so the envelope
    # and its integral are computed on integer pairs and rounded once at the end.
    ctp = np.cumsum(tp).tolist()
    best_h, best_r = 0, 1
    weight: Counter = Counter()
    for k in range(len(ctp) - 1, -1, -1):
        h, r = ctp[k], k + 1
        if h * best_r > best_h * r:
            best_h, best_r = h, r
        if tp[k]:
            weight[(best_h, best_r)] += 1
    total = sum((Fraction(c * h, r) for (h, r), c in weight.items()), Fraction(0))
    return float(total / n_pos)


def average_precision(detections: Sequence, ground_truth: Sequence, theta: float) -> Optional[float]:
    """AP of one set of detections against one set of boxes (None if no GT)."""
    m = match_detections(detections, ground_truth, theta)
    return ap_from_ranked([_score(d) for d in detections], m >= 0, len(ground_truth))


def _frame_entries(dets, gts, risks, theta, tau):
    risky = np.asarray(risks, dtype=float) > tau
    m = match_detections(dets, gts, theta)
    scores, tp = [], []
    for d, g in zip(dets, m):
        if g >= 0 and not risky[g]:
            continue
        scores.append(_score(d))
        tp.append(g >= 0)
    return scores, tp, int(risky.sum())


def risk_ap(detections: Sequence, ground_truth: Sequence, risks: Sequence[float], theta: float,
            tau: float) -> Optional[float]:
    """AP over ground truth with risk above ``tau``; None when that subset is empty."""
    if len(risks) != len(ground_truth):
        raise ValueError("one risk label per ground-truth box is required")
    scores, tp, n = _frame_entries(list(detections), list(ground_truth), risks, theta, tau)
    return ap_from_ranked(scores, tp, n)


def pooled_risk_ap(frames: Sequence[tuple[Sequence, Sequence, Sequence[float]]], theta: float,
                   tau: float) -> Optional[float]:
    """Risk-AP with detections ranked jointly across frames.

    ``frames`` holds ``(detections, ground_truth, risks)`` per frame;
    matching never crosses frames.
    """
    scores, tp, n = [], [], 0
    for dets, gts, risks in frames:
        s, t, k = _frame_entries(list(dets), list(gts), risks, theta, tau)
        scores += s
        tp += t
        n += k
    return ap_from_ranked(scores, tp, n)

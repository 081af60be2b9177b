"""Experiment protocols over a scene suite.

P1 fixes a per-frame byte budget and reports Risk-AP, mean bytes per frame
and bpk (Risk-AP gained per KB over the no-cooperation run).  P2 searches
for the smallest budget whose Risk-AP reaches a target.

Only the designated ego of each scene is scored.  Sensing is shared across
every policy and budget run of a scene through :class:`SuiteRunner`.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

from .errors import ValidationError
from .metrics import pooled_risk_ap
from .protocol import CommPolicy, LowerBound, UpperBound
from .scenario import Scene, ScenarioKind, generate_scene
from .sim import FrameRecord, SceneSensing, SimConfig, simulate_scene

__all__ = [
    "DEFAULT_BUDGETS",
    "DEFAULT_THETAS",
    "DEFAULT_TAUS",
    "MatchConfig",
    "ReportRow",
    "EvalReport",
    "SuiteRunner",
    "P2Result",
    "default_suite",
    "evaluate_records",
    "risk_ap_of",
    "bytes_per_frame",
    "sweep_p1",
    "min_bytes_p2",
]

KB = 1024
DEFAULT_BUDGETS = (512, 717, 1024, 2048, 3072, 5120, 10240)
DEFAULT_THETAS = (0.3, 0.5, 0.7)
DEFAULT_TAUS = (0.2, 0.3, 0.4)
CSV_COLUMNS = ("policy", "budget_bytes", "theta", "tau", "ap", "bytes_per_frame", "bpk")


@dataclass(frozen=True)
class MatchConfig:
    thetas: tuple[float, ...] = DEFAULT_THETAS
    taus: tuple[float, ...] = DEFAULT_TAUS

    def __post_init__(self):
        object.__setattr__(self, "thetas", tuple(float(t) for t in self.thetas))
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))
        if not self.thetas or not all(0 < t <= 1 for t in self.thetas):
            raise ValidationError("IoU thresholds must lie in (0, 1]")
        if not self.taus or not all(0 <= t < 1 for t in self.taus):
            raise ValidationError("risk thresholds must lie in [0, 1)")


def default_suite(seeds: Iterable[int] = (0, 1, 2), kinds: Optional[Iterable] = None,
                  duration: int = 8, dt: float = 0.1) -> list[Scene]:
    """Every scenario kind crossed with every seed (21 scenes by default)."""
    kinds = list(ScenarioKind) if kinds is None else [ScenarioKind.parse(k) for k in kinds]
    return [generate_scene(k, s, duration, dt) for k in kinds for s in seeds]


# ---------------------------------------------------------------------------
# scoring


def _ego_frames(records: Sequence[FrameRecord]) -> list[FrameRecord]:
    out = [r for r in records if r.ground_truth is not None]
    return sorted(out, key=lambda r: (r.scene, r.frame))


def _frame_tuple(r: FrameRecord):
    gts = list(r.ground_truth)
    return list(r.detections), gts, [g["risk"] for g in gts]


def risk_ap_of(records: Sequence[FrameRecord], theta: float, tau: float) -> Optional[float]:
    return pooled_risk_ap([_frame_tuple(r) for r in _ego_frames(records)], theta, tau)


def bytes_per_frame(records: Sequence[FrameRecord]) -> float:
    ego = _ego_frames(records)
    if not ego:
        raise ValidationError("no ego frames in records")
    return sum(r.bytes_total for r in ego) / len(ego)


@dataclass(frozen=True)
class ReportRow:
    policy: str
    budget_bytes: int
    theta: float
    tau: float
    ap: Optional[float]
    bytes_per_frame: float
    bpk: Optional[float]
    frames: int

    def csv_fields(self) -> list[str]:
        f = lambda x: "" if x is None else f"{x:.6f}"
        return [self.policy, str(self.budget_bytes), f"{self.theta:g}", f"{self.tau:g}", f(self.ap),
                f"{self.bytes_per_frame:.3f}", f(self.bpk)]


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[ReportRow, ...]

    def get(self, policy: str, budget_bytes: int, theta: float, tau: float) -> ReportRow:
        for r in self.rows:
            if r.policy == policy and r.budget_bytes == budget_bytes and r.theta == theta and r.tau == tau:
                return r
        raise KeyError((policy, budget_bytes, theta, tau))

    def ap(self, policy: str, budget_bytes: int, theta: float, tau: float) -> Optional[float]:
        return self.get(policy, budget_bytes, theta, tau).ap

    @property
    def policies(self) -> list[str]:
        return sorted({r.policy for r in self.rows})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_fields())
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [{"policy": r.policy, "budget_bytes": r.budget_bytes, "theta": r.theta, "tau": r.tau,
                 "ap": r.ap, "bytes_per_frame": r.bytes_per_frame, "bpk": r.bpk, "frames": r.frames}
                for r in self.rows]
        return json.dumps({"columns": list(CSV_COLUMNS), "rows": rows}, indent=1, sort_keys=True) + "\n"


def evaluate_records(records: Sequence[FrameRecord], match: MatchConfig = MatchConfig()) -> EvalReport:
    """Group ego records by (policy, budget) and score every (theta, tau)."""
    groups: dict[tuple[str, int], list[FrameRecord]] = {}
    for r in records:
        if r.ground_truth is not None:
            groups.setdefault((r.policy, r.budget_bytes), []).append(r)
    if not groups:
        raise ValidationError("no data: records contain no scored ego frames")
    stats = {}
    for key, recs in groups.items():
        frames = [_frame_tuple(r) for r in _ego_frames(recs)]
        aps = {(th, ta): pooled_risk_ap(frames, th, ta) for th in match.thetas for ta in match.taus}
        stats[key] = (aps, bytes_per_frame(recs), len(frames))
    lower = {b: stats[(p, b)] for p, b in stats if p == LowerBound().name}
    rows = []
    for (policy, budget) in sorted(stats):
        aps, bpf, n = stats[(policy, budget)]
        ref = lower.get(budget) or (next(iter(lower[b] for b in sorted(lower))) if lower else None)
        for th in match.thetas:
            for ta in match.taus:
                ap = aps[(th, ta)]
                bpk = None
                if ref is not None and policy != LowerBound().name and ap is not None:
                    ref_ap, ref_bytes = ref[0][(th, ta)], ref[1]
                    if ref_ap is not None and bpf > ref_bytes:
                        bpk = (ap - ref_ap) / ((bpf - ref_bytes) / KB)
                rows.append(ReportRow(policy, budget, th, ta, ap, bpf, bpk, n))
    return EvalReport(tuple(rows))


# ---------------------------------------------------------------------------
# running


_BUDGET_FREE = (UpperBound, LowerBound)


class SuiteRunner:
    """Runs policies over a fixed scene list, sharing sensing and memoizing runs.

    Policies whose behaviour ignores the budget are simulated once and
    relabelled for every requested budget.  Only the ego decodes detections,
    since scoring never looks at other agents.
    """

    def __init__(self, scenes: Sequence[Scene], base_config: SimConfig = SimConfig()):
        if not scenes:
            raise ValidationError("scene suite is empty")
        names = [s.name for s in scenes]
        if len(set(names)) != len(names):
            raise ValidationError("scene names must be unique within a suite")
        self.scenes = sorted(scenes, key=lambda s: s.name)
        self.base = base_config
        self._sensing = {s.name: SceneSensing(s, base_config) for s in self.scenes}
        self._runs: dict[tuple, list[FrameRecord]] = {}

    def config(self, policy: CommPolicy, budget_bytes: int) -> SimConfig:
        return replace(self.base, policy=policy, budget=self.base.budget.with_bytes(int(budget_bytes)))

    def run(self, policy: CommPolicy, budget_bytes: int) -> list[FrameRecord]:
        budget_bytes = int(budget_bytes)
        free = isinstance(policy, _BUDGET_FREE)
        key = (policy, None if free else budget_bytes)
        if key not in self._runs:
            cfg = self.config(policy, budget_bytes)
            recs = []
            for s in self.scenes:
                recs.extend(simulate_scene(s, cfg, self._sensing[s.name], decode_agents=[s.ego_id]))
            self._runs[key] = recs
        recs = self._runs[key]
        if free and recs and recs[0].budget_bytes != budget_bytes:
            recs = [replace(r, budget_bytes=budget_bytes) for r in recs]
        return recs

    def risk_ap(self, policy: CommPolicy, budget_bytes: int, theta: float, tau: float) -> Optional[float]:
        return risk_ap_of(self.run(policy, budget_bytes), theta, tau)

    def bytes_per_frame(self, policy: CommPolicy, budget_bytes: int) -> float:
        return bytes_per_frame(self.run(policy, budget_bytes))


def sweep_p1(scenes: Sequence[Scene], policies: Sequence[CommPolicy], budgets: Sequence[int] = DEFAULT_BUDGETS,
             base_config: SimConfig = SimConfig(), match: MatchConfig = MatchConfig(),
             runner: Optional[SuiteRunner] = None) -> tuple[EvalReport, list[FrameRecord]]:
    """Every policy at every budget over the suite; returns the report and all records."""
    if not budgets or any(int(b) != b or b <= 0 for b in budgets):
        raise ValidationError("budgets must be positive integers")
    runner = runner or SuiteRunner(scenes, base_config)
    records = []
    for p in policies:
        for b in budgets:
            records.extend(runner.run(p, int(b)))
    return evaluate_records(records, match), records


@dataclass(frozen=True)
class P2Result:
    budget_bytes: int
    risk_ap: float
    bytes_per_frame: float
    latency_frames: Optional[float]
    scenes_reaching: int


def _latency(records: Sequence[FrameRecord], theta: float, tau: float, target: float):
    """Mean over scenes of the first frame index at which cumulative Risk-AP meets the target."""
    by_scene: dict[str, list[FrameRecord]] = {}
    for r in _ego_frames(records):
        by_scene.setdefault(r.scene, []).append(r)
    hits = []
    for name in sorted(by_scene):
        frames = [_frame_tuple(r) for r in by_scene[name]]
        for t in range(len(frames)):
            ap = pooled_risk_ap(frames[: t + 1], theta, tau)
            if ap is not None and ap >= target:
                hits.append(t)
                break
    return (sum(hits) / len(hits) if hits else None), len(hits)


def min_bytes_p2(scenes: Sequence[Scene], policy: CommPolicy, target: tuple[float, float, float],
                 base_config: SimConfig = SimConfig(), granularity: int = 64, ceiling: int = 64 * KB,
                 runner: Optional[SuiteRunner] = None) -> Optional[P2Result]:
    """Smallest budget (a multiple of ``granularity``) whose Risk-AP reaches the target.

    ``target`` is ``(theta, tau, ap)``.  The search keeps a failing lower
    bracket and a passing upper bracket, so the answer ``B`` always
    satisfies ``f(B) >= ap`` and ``f(B - granularity) < ap``.  Returns None
    when even ``ceiling`` falls short.
    """
    theta, tau, ap_target = target
    if not 0 < ap_target <= 1:
        raise ValidationError("target AP must lie in (0, 1]")
    if granularity <= 0 or ceiling < granularity:
        raise ValidationError("need 0 < granularity <= ceiling")
    runner = runner or SuiteRunner(scenes, base_config)

    def ok(k: int) -> bool:
        ap = runner.risk_ap(policy, k * granularity, theta, tau)
        return ap is not None and ap >= ap_target

    top = ceiling // granularity
    if ok(0):
        hi = 0
    elif not ok(top):
        return None
    else:
        lo, hi = 0, top
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if ok(mid):
                hi = mid
            else:
                lo = mid
    B = hi * granularity
    recs = runner.run(policy, B)
    lat, n = _latency(recs, theta, tau, ap_target)
    return P2Result(B, risk_ap_of(recs, theta, tau), bytes_per_frame(recs), lat, n)

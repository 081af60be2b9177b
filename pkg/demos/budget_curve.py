"""How much detection quality each byte buys.

Runs every communication policy over a small slice of the synthetic suite at
several link budgets and prints Risk-AP next to the bytes actually sent per ego
frame.  The full 21-scene suite gives smoother numbers; pass ``--full`` for it
(about a minute and a half).

    python3 demos/budget_curve.py [--full]
"""

from __future__ import annotations

import sys

from sracp.evaluation import MatchConfig, SuiteRunner, default_suite, sweep_p1
from sracp.protocol import SRACP, FixedNeighborEqual, LowerBound, RandomCell, UpperBound
from sracp.sim import SimConfig

full = "--full" in sys.argv
scenes = default_suite() if full else default_suite((0,))
policies = [LowerBound(), RandomCell(), FixedNeighborEqual(), SRACP(), UpperBound()]
budgets = (512, 1024, 2048, 5120)
match = MatchConfig(thetas=(0.5,), taus=(0.2, 0.4))

runner = SuiteRunner(scenes, SimConfig())
report, _ = sweep_p1(scenes, policies, budgets, SimConfig(), match, runner=runner)

print(f"{len(scenes)} scenes, IoU threshold 0.5")
print(f"{'policy':<20}{'budget':>8}{'bytes/frame':>13}{'AP tau=.2':>11}{'AP tau=.4':>11}")
for p in policies:
    for b in budgets:
        lo, hi = report.get(p.name, b, 0.5, 0.2), report.get(p.name, b, 0.5, 0.4)
        print(f"{p.name:<20}{b:>8}{lo.bytes_per_frame:>13.0f}{lo.ap:>11.3f}{hi.ap:>11.3f}")
        if p.name in ("LowerBound", "UpperBound"):
            break  # these two ignore the budget

ub = runner.bytes_per_frame(UpperBound(), budgets[0])
b20 = int(0.2 * ub)
gap = runner.risk_ap(UpperBound(), b20, 0.5, 0.2) - runner.risk_ap(SRACP(), b20, 0.5, 0.2)
print()
print(f"UpperBound sends {ub:.0f} bytes per ego frame. At a fifth of that ({b20} bytes)")
print(f"risk-aware sharing trails it by {gap:.3f} Risk-AP at tau=0.2.")

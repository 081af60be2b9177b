"""Risk-aware selective cooperative perception on a synthetic bird's-eye-view grid.

Module map:

* :mod:`sracp.grid`: grids, poses, occupancy, transmittance, blind zones
* :mod:`sracp.risk`: object risk scores, risk maps and the cell risk prior
* :mod:`sracp.selection`: gain, gate modes, budgeted top-K and payload bytes
* :mod:`sracp.features` / :mod:`sracp.fusion`: surrogate features, fusion, decoding
* :mod:`sracp.protocol`: wire messages and communication policies
* :mod:`sracp.scenario`: scene generation and ray casting
* :mod:`sracp.sim`: the per-frame protocol simulation
* :mod:`sracp.metrics` / :mod:`sracp.evaluation`: IoU, AP, Risk-AP and sweeps
* :mod:`sracp.config` / :mod:`sracp.cli`: TOML configuration and the command line
"""

from __future__ import annotations

from .errors import BudgetError, ProtocolError, ValidationError
from .evaluation import DEFAULT_BUDGETS, EvalReport, MatchConfig, SuiteRunner, default_suite, min_bytes_p2, sweep_p1
from .grid import BlindZoneMask, FovSpec, GridSpec, Pose2D
from .protocol import SRACP, FixedNeighborEqual, LowerBound, RandomCell, UpperBound, parse_policy
from .scenario import Scene, ScenarioKind, generate_scene
from .selection import BudgetSpec, GateMode
from .sim import FrameRecord, SimConfig, simulate_scene

__version__ = "0.1.0"

__all__ = [
    "BudgetError",
    "ProtocolError",
    "ValidationError",
    "DEFAULT_BUDGETS",
    "EvalReport",
    "MatchConfig",
    "SuiteRunner",
    "default_suite",
    "min_bytes_p2",
    "sweep_p1",
    "BlindZoneMask",
    "FovSpec",
    "GridSpec",
    "Pose2D",
    "SRACP",
    "FixedNeighborEqual",
    "LowerBound",
    "RandomCell",
    "UpperBound",
    "parse_policy",
    "Scene",
    "ScenarioKind",
    "generate_scene",
    "BudgetSpec",
    "GateMode",
    "FrameRecord",
    "SimConfig",
    "simulate_scene",
]

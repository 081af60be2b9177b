"""Run configuration loaded from a TOML file.

Every section maps onto one library dataclass, so the defaults documented
there apply to omitted keys.  Unknown sections or keys are rejected with
the line they appear on::

    [scenes]
    kinds = ["UnprotectedLeftTurn", "Merge"]
    seeds = [0, 1, 2]

    [sim]
    tau_r = 0.3

    [budget]
    B_bytes = 1024

    [policy]
    name = "SRACP"
    gate = "union"
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional

import tomli

from .errors import ValidationError
from .evaluation import DEFAULT_BUDGETS, MatchConfig, default_suite
from .grid import FovSpec, GridSpec
from .protocol import CommPolicy, parse_policy
from .risk import RiskWeights
from .scenario import Scene, ScenarioKind
from .selection import BudgetSpec
from .sim import SimConfig

__all__ = ["RunConfig", "ScenesConfig", "PolicyConfig", "SweepConfig", "P2Config", "load_config", "parse_config"]


@dataclass(frozen=True)
class ScenesConfig:
    kinds: tuple[str, ...] = tuple(k.value for k in ScenarioKind)
    seeds: tuple[int, ...] = (0, 1, 2)
    duration: int = 8
    dt: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(ScenarioKind.parse(k).value for k in self.kinds))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.kinds or not self.seeds:
            raise ValidationError("scenes need at least one kind and one seed")
        if any(s < 0 for s in self.seeds):
            raise ValidationError("scene seeds must be non-negative")
        if self.duration < 1 or not self.dt > 0:
            raise ValidationError("duration must be >= 1 and dt > 0")

    def build(self) -> list[Scene]:
        return default_suite(self.seeds, self.kinds, self.duration, self.dt)


@dataclass(frozen=True)
class PolicyConfig:
    name: str = "SRACP"
    gate: str = "union"
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.build()  # validates

    def build(self) -> CommPolicy:
        return parse_policy(self.name, self.gate, self.alpha, self.seed)


@dataclass(frozen=True)
class SweepConfig:
    budgets: tuple[int, ...] = DEFAULT_BUDGETS
    policies: tuple[str, ...] = ("SRACP", "UpperBound", "LowerBound", "FixedNeighborEqual", "RandomCell")

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(self.budgets))
        object.__setattr__(self, "policies", tuple(self.policies))
        if not self.budgets or any(not isinstance(b, int) or b <= 0 for b in self.budgets):
            raise ValidationError("sweep budgets must be positive integers")
        for p in self.policies:
            parse_policy(p)


@dataclass(frozen=True)
class P2Config:
    theta: float = 0.5
    tau: float = 0.4
    target_ap: float = 0.5
    granularity: int = 64
    ceiling: int = 65536

    def __post_init__(self):
        MatchConfig((self.theta,), (self.tau,))
        if not 0 < self.target_ap <= 1:
            raise ValidationError("target_ap must lie in (0, 1]")
        if self.granularity <= 0 or self.ceiling < self.granularity:
            raise ValidationError("need 0 < granularity <= ceiling")


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "out"
    scenes: ScenesConfig = ScenesConfig()
    sim: SimConfig = SimConfig()
    policy: PolicyConfig = PolicyConfig()
    match: MatchConfig = MatchConfig()
    sweep: SweepConfig = SweepConfig()
    p2: P2Config = P2Config()

    def sim_config(self) -> SimConfig:
        """SimConfig carrying the configured policy."""
        return replace(self.sim, policy=self.policy.build())

    def with_overrides(self, *, seed: Optional[int] = None, policy: Optional[str] = None,
                       budget_bytes: Optional[int] = None, gate: Optional[str] = None,
                       out_dir: Optional[str] = None) -> "RunConfig":
        """Apply command-line overrides, re-validating the affected sections."""
        cfg = self
        if seed is not None:
            cfg = replace(cfg, sim=replace(cfg.sim, seed=seed), scenes=replace(cfg.scenes, seeds=(seed,)),
                          policy=replace(cfg.policy, seed=seed))
        if policy is not None:
            cfg = replace(cfg, policy=replace(cfg.policy, name=policy))
        if gate is not None:
            cfg = replace(cfg, policy=replace(cfg.policy, gate=gate))
        if budget_bytes is not None:
            cfg = replace(cfg, sim=replace(cfg.sim, budget=cfg.sim.budget.with_bytes(budget_bytes)))
        if out_dir is not None:
            cfg = replace(cfg, out_dir=out_dir)
        return cfg


# ---------------------------------------------------------------------------
# loading

_SIM_SCALARS = {f.name for f in dataclasses.fields(SimConfig)} - {"grid", "fov", "budget", "policy", "weights"}


def _line_of(text: str, section: Optional[str], key: str) -> Optional[int]:
    """Best-effort line number of ``key`` (inside ``[section]`` when given)."""
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\[\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            if section is None and current == key:
                return n
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", s):
            return n
    return None


def _where(source: str, text: str, section: Optional[str], key: str) -> str:
    line = _line_of(text, section, key)
    return f"{source}:{line}" if line else source


def _tuples(value: Any) -> Any:
    return tuple(value) if isinstance(value, list) else value


def _build(cls, values: dict, section: str, source: str, text: str, allowed=None):
    allowed = allowed if allowed is not None else {f.name for f in dataclasses.fields(cls)}
    for k in values:
        if k not in allowed:
            raise ValidationError(f"{_where(source, text, section, k)}: unknown key {k!r} in [{section}]")
    kwargs = {k: _tuples(v) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        named = [k for k in values if k in str(exc)]
        key = named[0] if named else next(iter(values), None)
        where = _where(source, text, None, section) if key is None else _where(source, text, section, key)
        raise ValidationError(f"{where}: invalid [{section}]: {exc}") from exc


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse TOML text into a validated RunConfig."""
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ValidationError(f"{source}: {exc}") from exc
    sections = {"run", "scenes", "sim", "grid", "fov", "budget", "risk", "policy", "match", "sweep", "p2"}
    for k, v in data.items():
        if k not in sections or not isinstance(v, dict):
            raise ValidationError(f"{_where(source, text, None, k)}: unknown section or top-level key {k!r}")

    run = data.get("run", {})
    for k in run:
        if k != "out_dir":
            raise ValidationError(f"{_where(source, text, 'run', k)}: unknown key {k!r} in [run]")

    grid_kw = dict(data.get("grid", {}))
    for k in grid_kw:
        if k not in ("half_extent", "cell_size"):
            raise ValidationError(f"{_where(source, text, 'grid', k)}: unknown key {k!r} in [grid]")
    base = SimConfig()
    try:
        grid = (GridSpec.centered(float(grid_kw.get("half_extent", -base.grid.x_min)),
                                  float(grid_kw.get("cell_size", base.grid.cell_size))) if grid_kw else base.grid)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{_where(source, text, None, 'grid')}: invalid [grid]: {exc}") from exc
    fov = _build(FovSpec, data.get("fov", {}), "fov", source, text)
    budget = _build(BudgetSpec, data.get("budget", {}), "budget", source, text)
    weights = _build(RiskWeights, data.get("risk", {}), "risk", source, text)

    sim_values = dict(data.get("sim", {}))
    sim_values.update(grid=grid, fov=fov, budget=budget, weights=weights)
    allowed = _SIM_SCALARS | {"grid", "fov", "budget", "weights"}
    sim = _build(SimConfig, sim_values, "sim", source, text, allowed)

    return RunConfig(
        out_dir=str(run.get("out_dir", "out")),
        scenes=_build(ScenesConfig, data.get("scenes", {}), "scenes", source, text),
        sim=sim,
        policy=_build(PolicyConfig, data.get("policy", {}), "policy", source, text),
        match=_build(MatchConfig, data.get("match", {}), "match", source, text),
        sweep=_build(SweepConfig, data.get("sweep", {}), "sweep", source, text),
        p2=_build(P2Config, data.get("p2", {}), "p2", source, text),
    )


def load_config(path) -> RunConfig:
    """Read and validate a TOML run configuration; missing files raise ValidationError."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {p}: {exc.strerror or exc}") from exc
    return parse_config(text, str(p))

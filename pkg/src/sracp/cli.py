"""Command-line entry point: ``sracp <subcommand> ...``.

Subcommands
-----------
scene-gen     write one generated scene as JSON
simulate      run the configured policy over the configured scenes (NDJSON logs + summary)
eval          score a directory of NDJSON logs (CSV + JSON report)
sweep-p1      every sweep policy at every sweep budget (CSV + JSON report)
min-bytes-p2  smallest budget reaching a Risk-AP target

``--seed``, ``--policy``, ``--budget-bytes`` and ``--gate {s,r,union}``
override the matching config keys on every config-driven subcommand.
Validation problems exit with status 2 and a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig, load_config
from .errors import ProtocolError, ValidationError
from .evaluation import MatchConfig, SuiteRunner, bytes_per_frame, evaluate_records, min_bytes_p2, sweep_p1
from .protocol import parse_policy
from .scenario import ScenarioKind, generate_scene, load_scene, save_scene
from .sim import SceneSensing, read_ndjson, simulate_scene, write_ndjson

log = logging.getLogger("sracp")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed, policy=args.policy, budget_bytes=args.budget_bytes,
                              gate=args.gate, out_dir=args.out_dir)


# ---------------------------------------------------------------------------
# subcommands


def cmd_scene_gen(args) -> int:
    scene = generate_scene(ScenarioKind.parse(args.kind), args.seed, args.duration, args.dt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out)
    if load_scene(out) != scene:
        raise ValidationError(f"{out}: scene did not round-trip")
    print(out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    sim = cfg.sim_config()
    scenes = [load_scene(p) for p in args.scene] if args.scene else cfg.scenes.build()
    out = Path(cfg.out_dir)
    logs = out / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    summary = {"policy": sim.policy.name, "budget_bytes": sim.budget.B_bytes, "scenes": []}
    for scene in scenes:
        records = simulate_scene(scene, sim, SceneSensing(scene, sim))
        write_ndjson(records, logs / f"{scene.name}.ndjson")
        summary["scenes"].append({
            "scene": scene.name,
            "frames": len({r.frame for r in records}),
            "requests": sum(len(r.requests) for r in records),
            "bytes_beacon": sum(r.bytes_beacon for r in records),
            "bytes_request": sum(r.bytes_request for r in records),
            "bytes_payload": sum(r.bytes_payload for r in records),
            "ego_bytes_per_frame": round(bytes_per_frame(records), 3),
        })
        log.info("simulated %s", scene.name)
    summary["bytes_payload"] = sum(s["bytes_payload"] for s in summary["scenes"])
    _write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(out / "summary.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    logs = Path(args.logs)
    if not logs.is_dir():
        raise ValidationError(f"{logs}: not a directory")
    files = sorted(logs.glob("*.ndjson"))
    records = [r for f in files for r in read_ndjson(f)]
    if not records:
        raise ValidationError(f"{logs}: no data (no NDJSON frame records found)")
    cfg = load_config(args.config) if args.config else RunConfig()
    match = MatchConfig(args.thetas or cfg.match.thetas, args.taus or cfg.match.taus)
    report = evaluate_records(records, match)
    out = Path(args.out_dir) if args.out_dir else logs.parent
    _write(out / "report.csv", report.to_csv())
    _write(out / "report.json", report.to_json())
    print(out / "report.csv")
    return EXIT_OK


def cmd_sweep_p1(args) -> int:
    cfg = _config(args)
    scenes = cfg.scenes.build()
    if args.policy is not None:
        policies = [cfg.policy.build()]
    else:
        policies = [parse_policy(p, seed=cfg.policy.seed) for p in cfg.sweep.policies]
    budgets = (args.budget_bytes,) if args.budget_bytes is not None else cfg.sweep.budgets
    runner = SuiteRunner(scenes, cfg.sim)
    report, records = sweep_p1(scenes, policies, budgets, cfg.sim, cfg.match, runner=runner)
    out = Path(cfg.out_dir)
    _write(out / "p1.csv", report.to_csv())
    _write(out / "p1.json", report.to_json())
    if args.logs:
        (out / "logs").mkdir(parents=True, exist_ok=True)
        write_ndjson(records, out / "logs" / "p1.ndjson")
    print(out / "p1.csv")
    return EXIT_OK


def cmd_min_bytes_p2(args) -> int:
    cfg = _config(args)
    p2 = cfg.p2
    target = (args.theta if args.theta is not None else p2.theta,
              args.tau if args.tau is not None else p2.tau,
              args.target_ap if args.target_ap is not None else p2.target_ap)
    scenes = cfg.scenes.build()
    policy = cfg.policy.build()
    res = min_bytes_p2(scenes, policy, target, cfg.sim, p2.granularity, p2.ceiling)
    doc = {"policy": policy.name, "theta": target[0], "tau": target[1], "target_ap": target[2],
           "reached": res is not None}
    if res is not None:
        doc.update(budget_bytes=res.budget_bytes, risk_ap=round(res.risk_ap, 6),
                   bytes_per_frame=round(res.bytes_per_frame, 3),
                   latency_frames=None if res.latency_frames is None else round(res.latency_frames, 6),
                   scenes_reaching=res.scenes_reaching)
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    _write(Path(cfg.out_dir) / "p2.json", text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_overrides(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("config", nargs=None if config_required else "?", help="TOML run configuration")
    p.add_argument("--seed", type=int, help="scene, sensing and policy seed (replaces the scene seed list)")
    p.add_argument("--policy", help="SRACP, UpperBound, LowerBound, FixedNeighborEqual or RandomCell")
    p.add_argument("--budget-bytes", type=int, dest="budget_bytes", help="per-link payload budget in bytes")
    p.add_argument("--gate", choices=("s", "r", "union"), help="SRACP gate mode")
    p.add_argument("--out-dir", dest="out_dir", help="output directory (config [run] out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sracp", description="Risk-aware cooperative perception simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scene-gen", help="write one generated scene as JSON")
    p.add_argument("--kind", required=True, help="scenario kind, e.g. UnprotectedLeftTurn")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=int, default=8, help="frames")
    p.add_argument("--dt", type=float, default=0.1, help="seconds per frame")
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_scene_gen)

    p = sub.add_parser("simulate", help="run one policy over the configured scenes")
    _add_overrides(p)
    p.add_argument("--scene", action="append", help="scene JSON file(s) to use instead of [scenes]")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="score a directory of NDJSON logs")
    p.add_argument("logs", help="directory containing *.ndjson logs")
    p.add_argument("--config", help="TOML config supplying [match] thresholds")
    p.add_argument("--thetas", type=_floats, help="IoU thresholds, e.g. 0.3,0.5,0.7")
    p.add_argument("--taus", type=_floats, help="risk thresholds, e.g. 0.2,0.3,0.4")
    p.add_argument("--out-dir", dest="out_dir", help="report directory (default: parent of logs)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-p1", help="fixed-budget sweep over policies and budgets")
    _add_overrides(p)
    p.add_argument("--logs", action="store_true", help="also write the frame records as NDJSON")
    p.set_defaults(func=cmd_sweep_p1)

    p = sub.add_parser("min-bytes-p2", help="smallest budget reaching a Risk-AP target")
    _add_overrides(p)
    p.add_argument("--theta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--target-ap", type=float, dest="target_ap")
    p.set_defaults(func=cmd_min_bytes_p2)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

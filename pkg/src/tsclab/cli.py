"""Command-line entry point: ``tsclab <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness
from .compression import DEFAULT_LEVELS
from .dqn import AgentConfig
from .metrics import CSV_FIELDS, NoArrivalsError
from .observation import KINDS, ObservationConfig
from .scenarios import TEMPLATES, gen_scenario, write_scenario
from .sim import ScenarioError, load_scenario

log = logging.getLogger("tsclab")


def _seeds(text: str) -> list[int]:
    """'0,1,2' or '0-4'."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _common(p: argparse.ArgumentParser, episodes: bool = True) -> None:
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--config", help="experiment config JSON (flags override it)")
    p.add_argument("--repr", choices=KINDS, help="state representation")
    p.add_argument("--seeds", type=_seeds, help="e.g. 0,1,2 or 0-4")
    if episodes:
        p.add_argument("--episodes", type=int)
    p.add_argument("--out", required=True, help="output directory")


def _experiment(args, mode: str) -> harness.ExperimentConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.scenario:
        base["scenario"] = args.scenario
    if "scenario" not in base:
        raise SystemExit("error: --scenario or a config with 'scenario' is required")
    if args.repr:
        base["obs"] = {**base.get("obs", {}), "kind": args.repr}
    if args.seeds:
        base["seeds"] = args.seeds
    if getattr(args, "episodes", None):
        base["episodes"] = args.episodes
    agent = base.get("agent", {})
    for flag, key in (("gamma", "gamma"), ("lr", "lr"), ("target_update", "target_update")):
        val = getattr(args, flag, None)
        if val is not None:
            agent[key] = val
    base["agent"] = agent
    base["out"] = args.out
    base["mode"] = mode
    return harness.ExperimentConfig.from_dict(base)


def cmd_gen_scenario(args) -> int:
    doc = gen_scenario(args.template, args.demand, args.seed, args.horizon)
    path = write_scenario(doc, args.out)
    print(f"{path}: {len(doc['intersections'])} intersection(s), {len(doc['demand'])} vehicles")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args, "train")

    def progress(seed, ep, m):
        if (ep + 1) % 10 == 0:
            log.info("seed %d episode %d AWT %.2f", seed, ep + 1, m.AWT)

    arts = harness.train_experiment(cfg, progress)
    b = arts.best
    print(f"best seed {arts.best_seed}: ATT {b.ATT:.2f} AD {b.AD:.2f} AWT {b.AWT:.2f} "
          f"AQL {b.AQL:.3f}")
    return 0


def cmd_evaluate(args) -> int:
    sim = load_scenario(args.scenario)
    seeds = args.seeds or [0]
    reports = harness.evaluate(args.controller, sim, seeds, args.green)
    out = Path(args.out)
    rows = [r.as_row(run_id=out.name, seed=s, repr=args.controller, episode=0)
            for s, r in zip(seeds, reports)]
    harness._write_csv(out / "metrics.csv", rows, CSV_FIELDS)
    harness._write_json(out / "manifest.json", harness.manifest(
        {"scenario": args.scenario, "controller": args.controller, "seeds": seeds,
         "green": args.green, "mode": "eval"}))
    for s, r in zip(seeds, reports):
        print(f"seed {s}: ATT {r.ATT:.2f} AD {r.AD:.2f} AWT {r.AWT:.2f} AQL {r.AQL:.3f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _experiment(args, "sweep")
    grid = cfg.grid or harness.DEFAULT_GRID
    if args.runs or args.episodes:
        grid = dataclasses.replace(grid, runs=args.runs or grid.runs,
                                   episodes=args.episodes or grid.episodes)
    cfg = dataclasses.replace(cfg, grid=grid)

    def progress(ci, r, score):
        log.info("combo %d run %d score %.3f", ci, r, score)

    best, rows = harness.run_grid(cfg, progress)
    print(f"{len(rows)} combos x {grid.runs} runs x {grid.episodes} episodes; best "
          f"gamma={best.gamma} lr={best.lr} target_update={best.target_update} "
          f"score {rows[0]['score']:.3f}")
    return 0


def cmd_prune_sweep(args) -> int:
    levels = args.levels or list(DEFAULT_LEVELS)
    rep = harness.prune_sweep(args.checkpoint, args.scenario, args.seeds or [0], levels,
                              args.out)
    for level in rep.levels:
        print(f"sparsity {level:.2f}: mean reward {rep.mean_reward(level):.1f} "
              f"AWT {rep.mean_metric(level, 'AWT'):.2f}")
    return 0


def cmd_report(args) -> int:
    res = harness.report(args.runs, args.out)
    for r in res.get("comparison", []):
        print(f"{r['repr']:>6} ({r['run']}): " +
              " ".join(f"{m} {r[m]:.2f}" for m in harness.METRICS))
    if "sparsity" in res:
        print(f"sparsity curve: {len(res['sparsity'])} points")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tsclab", description="DQN traffic signal control lab")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-scenario", help="write a built-in scenario file")
    p.add_argument("--template", choices=TEMPLATES, default="single4way")
    p.add_argument("--demand", type=float, default=360.0, help="veh/h per external approach")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=3600.0)
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(fn=cmd_gen_scenario)

    p = sub.add_parser("train", help="multi-seed training with greedy evaluation")
    _common(p)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--target-update", dest="target_update", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint dir or a baseline")
    p.add_argument("--scenario", required=True)
    p.add_argument("--controller", required=True,
                   help="'fixed-time', 'random' or a checkpoint directory")
    p.add_argument("--seeds", type=_seeds)
    p.add_argument("--green", type=float, default=30.0, help="fixed-time green per phase (s)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="hyperparameter grid search")
    _common(p)
    p.add_argument("--runs", type=int, help="training runs per combo")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("prune-sweep", help="global magnitude pruning sweep of a checkpoint")
    p.add_argument("--scenario", required=True)
    p.add_argument("--checkpoint", required=True, help="directory of <intersection>.net files")
    p.add_argument("--seeds", type=_seeds)
    p.add_argument("--levels", type=_floats)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_prune_sweep)

    p = sub.add_parser("report", help="comparison table and sparsity curve from run dirs")
    p.add_argument("--runs", required=True, help="directory holding run outputs")
    p.add_argument("--out", help="where to write tables (default: --runs)")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.fn(args)
    except (ScenarioError, NoArrivalsError, harness.MissingArtifactsError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

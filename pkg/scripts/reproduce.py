#!/usr/bin/env python3
"""Full desk-scale pipeline on single4way at 360 veh/h/approach.

Steps: scenario file, grid search on vehicle-count, baselines, 5-seed
training for each representation with the grid winner, pruning sweep of the
best image-like checkpoint, comparison report. Several hours on one core.

    python3 scripts/reproduce.py --out runs/
    python3 scripts/reproduce.py --out runs/ --skip-grid   # reuse defaults
    python3 scripts/reproduce.py --out /tmp/quick --quick   # minutes-long smoke run
"""

import argparse
import csv
import json
import sys
from pathlib import Path

from tsclab.cli import main as tsclab


def step(*argv: str) -> None:
    print("$ tsclab " + " ".join(argv), flush=True)
    code = tsclab(["-v", *argv])
    if code:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--demand", type=float, default=360.0)
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--seeds", default="0-4")
    ap.add_argument("--reprs", default="count,wait,image")
    ap.add_argument("--skip-grid", action="store_true", help="train with AgentConfig defaults")
    ap.add_argument("--quick", action="store_true",
                    help="5-minute horizon, tiny grid and few episodes")
    args = ap.parse_args()
    horizon, grid = "3600", []
    if args.quick:
        horizon, grid = "300", ["--runs", "1", "--episodes", "1"]
        args.episodes, args.seeds = 3, "0-1"

    out = Path(args.out)
    scenario = out / "single4way.json"
    step("gen-scenario", "--template", "single4way", "--demand", str(args.demand),
         "--horizon", horizon, "--out", str(scenario))

    agent = {}
    if not args.skip_grid:
        step("sweep", "--scenario", str(scenario), "--repr", "count", "--seeds", "0", *grid,
             "--out", str(out / "grid"))
        agent = json.loads((out / "grid" / "best_config.json").read_text())

    for ctl in ("fixed-time", "random"):
        step("evaluate", "--scenario", str(scenario), "--controller", ctl,
             "--seeds", args.seeds, "--out", str(out / "baselines" / ctl))

    runs = out / "runs"
    for kind in args.reprs.split(","):
        cfg = out / f"train_{kind}.json"
        cfg.write_text(json.dumps({"scenario": str(scenario), "agent": agent}, indent=2))
        step("train", "--config", str(cfg), "--repr", kind, "--seeds", args.seeds,
             "--episodes", str(args.episodes), "--out", str(runs / kind))

    if "image" in args.reprs.split(","):
        with open(runs / "image" / "best.csv") as f:
            seed = next(csv.DictReader(f))["seed"]
        step("prune-sweep", "--scenario", str(scenario),
             "--checkpoint", str(runs / "image" / f"seed_{seed}" / "final"),
             "--seeds", args.seeds, "--out", str(runs / "prune"))
    step("report", "--runs", str(runs))


if __name__ == "__main__":
    main()

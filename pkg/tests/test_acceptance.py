"""Acceptance criteria 1-8, each at its stated tolerance.

Criteria 5-8 train real agents on the full one-hour single4way episode at
360 veh/h/approach and take a few hours on one core. One PASS/FAIL line per
criterion is printed and repeated in the terminal summary.
"""

import time

import numpy as np
import pytest

from support import (
    criterion,
    gradient_rel_error,
    random_episode,
    random_net,
    train_tabular,
    value_iteration,
)
from tsclab import harness
from tsclab.cli import main
from tsclab.compression import DEFAULT_LEVELS, measured_sparsity, prune_global_magnitude
from tsclab.dqn import AgentConfig
from tsclab.neural import init
from tsclab.observation import ObservationConfig
from tsclab.scenarios import gen_scenario, write_scenario
from tsclab.sim import load_scenario

SEEDS = [0, 1, 2, 3, 4]
EPISODES = 200
METRICS = ("ATT", "AD", "AWT", "AQL")


# -- 1-4: oracles and properties ---------------------------------------------------


def test_criterion_1_simulator_invariants():
    with criterion(1, "simulator invariants over 1000 random episodes") as c:
        start = time.perf_counter()
        spawned = arrived = 0
        for i in range(1000):
            sim = random_episode(np.random.default_rng(i), n=1 + i % 3, horizon=60.0)
            spawned += sim.spawned_total
            arrived += sim.arrived_total
        elapsed = time.perf_counter() - start
        c.detail = f"{elapsed:.1f}s (limit 60s), {spawned} spawned, {arrived} arrived"
        assert elapsed < 60.0
        assert arrived > 0


def test_criterion_2_gradient_oracle():
    with criterion(2, "backprop vs central differences on 50 nets") as c:
        rng = np.random.default_rng(2024)
        errs = []
        for k in range(50):
            net = random_net(rng, masked=k % 2 == 1)
            x = rng.normal(size=net.input_dim)
            g = rng.normal(size=net.output_dim)
            errs.append(gradient_rel_error(net, x, g, h=1e-5))
        c.detail = f"max relative error {max(errs):.2e} (limit 1e-4)"
        assert max(errs) < 1e-4


def test_criterion_3_q_learning_oracle():
    with criterion(3, "DQN on a 3-state MDP vs value iteration") as c:
        T = [[1, 2], [2, 0], [0, 1]]
        R = [[1.0, 0.0], [0.0, 2.0], [0.5, 1.0]]
        start = time.perf_counter()
        q_star = value_iteration(T, R, 0.5)
        q = train_tabular(T, R, 0.5, seed=0)
        elapsed = time.perf_counter() - start
        err = float(np.abs(q - q_star).max())
        c.detail = f"max|Q-Q*| {err:.2e} (limit 1e-2) in {elapsed:.1f}s (limit 30s)"
        assert err < 1e-2 and elapsed < 30.0


def test_criterion_4_pruning_exactness():
    with criterion(4, "pruning nesting, idempotence, equivalence, sparsity") as c:
        rng = np.random.default_rng(4)
        levels = [round(0.05 * k, 2) for k in range(1, 11)]
        worst = 0.0
        for trial in range(20):
            dims = [8, 128, 64, 4] if trial == 0 else [int(d) for d in rng.integers(2, 40, 3)]
            net = init(dims, trial)
            if trial % 4 == 3:
                net.layers[0].W[:] = np.round(net.layers[0].W, 1)
            prev = set()
            x = rng.normal(size=(8, dims[0]))
            for s in levels:
                p = prune_global_magnitude(net, s)
                zeros = set(np.flatnonzero(p.mask_full == 0))
                assert prev <= zeros
                prev = zeros
                again = prune_global_magnitude(p, s)
                assert again.mask_full.tobytes() == p.mask_full.tobytes()
                assert again.theta.tobytes() == p.theta.tobytes()
                dense = net.copy()
                for ly_d, ly_p in zip(dense.layers, p.layers):
                    ly_d.W[ly_p.mask == 0] = 0.0
                assert p.forward(x).tobytes() == dense.forward(x).tobytes()
                gap = abs(measured_sparsity(p) - s) * net.num_weights
                worst = max(worst, gap)
                assert gap <= 1.0
        c.detail = f"20 nets x 10 levels exact; worst sparsity gap {worst:.2f} weights (limit 1)"


# -- 5-8: desk-scale experiments -----------------------------------------------------


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def scenario(workdir):
    return write_scenario(gen_scenario("single4way", 360.0, seed=0), workdir / "single4way.json")


@pytest.fixture(scope="session")
def grid_runs(scenario, workdir):
    """The default 27-combo grid swept twice through the CLI with the same master seed."""
    out = []
    for k in range(2):
        d = workdir / f"sweep_{k}"
        start = time.perf_counter()
        assert main(["sweep", "--scenario", str(scenario), "--repr", "count", "--seeds", "0",
                     "--out", str(d)]) == 0
        out.append((d, time.perf_counter() - start))
    return out


@pytest.fixture(scope="session")
def tuned(grid_runs):
    import json

    return AgentConfig.from_dict(json.loads((grid_runs[0][0] / "best_config.json").read_text()))


@pytest.fixture(scope="session")
def baselines(scenario):
    sim = load_scenario(scenario)
    fixed = harness.evaluate("fixed-time", sim, SEEDS)
    rand = harness.evaluate("random", sim, SEEDS)
    return fixed, rand


@pytest.fixture(scope="session")
def trained(scenario, workdir, tuned):
    runs = {}
    for kind in ("count", "image"):
        cfg = harness.ExperimentConfig(str(scenario), ObservationConfig(kind), tuned, None,
                                       EPISODES, SEEDS, str(workdir / "runs" / kind))
        start = time.perf_counter()
        arts = harness.train_experiment(cfg)
        runs[kind] = (arts, time.perf_counter() - start)
    return runs


def test_criterion_5_control_quality(trained, baselines):
    with criterion(5, "DQN AWT vs fixed-time and random baselines") as c:
        fixed, rand = baselines
        fixed_awt = float(np.mean([m.AWT for m in fixed]))
        rand_awt = float(np.mean([m.AWT for m in rand]))
        fixed_arrived = float(np.mean([m.arrived for m in fixed]))
        parts, ok = [], False
        for kind, (arts, secs) in trained.items():
            b = arts.best
            good = (b.AWT <= 0.8 * fixed_awt and b.AWT <= 0.5 * rand_awt
                    and b.arrived >= 0.95 * fixed_arrived and secs < 30 * 60)
            ok |= good
            parts.append(f"{kind} AWT {b.AWT:.2f} arrived {b.arrived} ({secs / 60:.0f} min)")
        c.detail = (f"fixed-time AWT {fixed_awt:.2f} (arrived {fixed_arrived:.0f}), random AWT "
                    f"{rand_awt:.2f}; " + "; ".join(parts))
        assert ok


def test_criterion_6_representation_ordering(trained):
    with criterion(6, "image-like vs vehicle-count best rows") as c:
        img, cnt = trained["image"][0].best, trained["count"][0].best
        within = [m for m in METRICS if getattr(img, m) <= 1.05 * getattr(cnt, m)]
        impr = {m: harness.improvement(getattr(cnt, m), getattr(img, m)) for m in METRICS}
        c.detail = (
            "image " + " ".join(f"{m} {getattr(img, m):.2f}" for m in METRICS)
            + " | count " + " ".join(f"{m} {getattr(cnt, m):.2f}" for m in METRICS)
            + " | improvement % " + " ".join(f"{m} {impr[m]:.1f}" for m in METRICS)
            + f" | within 5% on {len(within)}/4"
        )
        assert img.AWT <= 1.05 * cnt.AWT
        assert len(within) >= 3


def test_criterion_7_sparsity_sweep_shape(trained, scenario, workdir):
    with criterion(7, "sparsity sweep of the best image-like agent") as c:
        arts = trained["image"][0]
        rep = harness.prune_sweep(arts.checkpoints[arts.best_seed], scenario, SEEDS,
                                  DEFAULT_LEVELS, workdir / "runs" / "prune")
        dense = rep.mean_reward(0.0)
        rewards = {s: rep.mean_reward(s) for s in rep.levels}
        close = [s for s in rep.levels if 0.0 < s <= 0.25
                 and abs(rewards[s] - dense) <= 0.05 * abs(dense)]
        best_below = max(r for s, r in rewards.items() if s < 0.5)
        c.detail = ("mean reward by level " + " ".join(f"{s:.2f}:{r:.0f}" for s, r in
                                                       rewards.items())
                    + f" | nonzero levels <=0.25 within 5% of dense: {close}")
        assert close
        assert rewards[0.5] <= best_below


def test_criterion_8_protocol_fidelity(grid_runs):
    import csv

    with criterion(8, "default grid sweep is complete and byte-identical on rerun") as c:
        (d0, t0), (d1, t1) = grid_runs
        a, b = (d0 / "ranking.csv").read_bytes(), (d1 / "ranking.csv").read_bytes()
        rows = list(csv.DictReader(open(d0 / "ranking.csv")))
        combos = {(r["gamma"], r["lr"], r["target_update"]) for r in rows}
        c.detail = (f"{len(rows)} combos, runs {sorted({r['runs'] for r in rows})}, episodes "
                    f"{sorted({r['episodes'] for r in rows})}, identical={a == b}, "
                    f"{t0 / 60:.0f}+{t1 / 60:.0f} min")
        assert len(rows) == 27 and len(combos) == 27
        assert all(r["runs"] == "3" and r["episodes"] == "70" for r in rows)
        assert all(len(r["run_scores"].split(";")) == 3 for r in rows)
        assert a == b

"""Experiment orchestration: grid search, multi-seed training, baselines, sweeps, reports.

Every output is CSV (plus a JSON manifest) written with fixed formatting, so
identical configs give byte-identical files.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import platform
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .compression import DEFAULT_LEVELS, SPARSITY_FIELDS, sparsity_sweep
from .controllers import FixedTimeController, RandomController
from .dqn import AgentConfig, DQNAgent, ScenarioMismatchError, run_episode, train_agents
from .metrics import CSV_FIELDS, MetricsReport, NoArrivalsError, finalize_metrics, write_metrics_csv
from .neural import DenseNet, load_checkpoint, save_checkpoint
from .observation import ObservationConfig
from .sim import Simulation, load_scenario

log = logging.getLogger(__name__)

METRICS = ("ATT", "AD", "AWT", "AQL")
SELECTION_METRIC = "AWT"
SELECTION_WINDOW = 10  # final training episodes scored per grid run
CHECKPOINT_EVERY = 25

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *keys: int) -> int:
    """Child seed from a master seed and integer keys; independent of job order."""
    h = _splitmix64(int(master) & _MASK64)
    for k in keys:
        h = _splitmix64(h ^ (int(k) & _MASK64))
    return h >> 1  # keep it a non-negative int63


# -- configs ------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    gammas: tuple[float, ...] = (0.9, 0.95, 0.99)
    lrs: tuple[float, ...] = (0.1, 0.01, 0.001)
    target_updates: tuple[int, ...] = (5, 10, 15)
    runs: int = 3
    episodes: int = 70

    def __post_init__(self):
        for name in ("gammas", "lrs", "target_updates"):
            if not getattr(self, name):
                raise ValueError(f"grid candidate list {name!r} is empty")
        if self.runs < 1 or self.episodes < 1:
            raise ValueError("runs and episodes must be >= 1")

    def combos(self) -> list[tuple[float, float, int]]:
        return list(itertools.product(self.gammas, self.lrs, self.target_updates))

    @property
    def size(self) -> int:
        return len(self.gammas) * len(self.lrs) * len(self.target_updates)

    @classmethod
    def from_dict(cls, d: dict) -> GridSpec:
        return cls(
            tuple(d.get("gammas", cls.gammas)),
            tuple(d.get("lrs", cls.lrs)),
            tuple(int(x) for x in d.get("target_updates", cls.target_updates)),
            int(d.get("runs", 3)),
            int(d.get("episodes", 70)),
        )


DEFAULT_GRID = GridSpec()


@dataclass
class ExperimentConfig:
    scenario: str
    obs: ObservationConfig = field(default_factory=ObservationConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    grid: GridSpec | None = None
    episodes: int = 200
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = "runs/default"
    mode: str = "train"
    levels: list[float] = field(default_factory=lambda: list(DEFAULT_LEVELS))

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be distinct, got {self.seeds}")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.mode not in ("train", "eval", "sweep", "prune-sweep"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "scenario": str(self.scenario),
            "obs": asdict(self.obs),
            "agent": self.agent.to_dict(),
            "grid": None if self.grid is None else asdict(self.grid),
            "episodes": self.episodes,
            "seeds": list(self.seeds),
            "out": str(self.out),
            "mode": self.mode,
            "levels": list(self.levels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        if "scenario" not in d:
            raise ValueError("config needs a 'scenario' path")
        obs = ObservationConfig(**d.pop("obs", {}))
        agent = AgentConfig.from_dict(d.pop("agent", {}))
        grid = d.pop("grid", None)
        grid = GridSpec.from_dict(grid) if grid else None
        return cls(obs=obs, agent=agent, grid=grid, **d)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def manifest(cfg: ExperimentConfig | dict, **extra) -> dict:
    return {
        "config": cfg.to_dict() if isinstance(cfg, ExperimentConfig) else cfg,
        "versions": {
            "tsclab": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        **extra,
    }


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(write_metrics_csv(rows, fields))


# -- training primitives -----------------------------------------------------------


def make_agents(sim: Simulation, obs: ObservationConfig, cfg: AgentConfig, seed: int):
    return [
        DQNAgent(
            iid, obs, sim.intersection(iid).num_lanes,
            sim.intersection(iid).program.num_phases, cfg, seed=derive_seed(seed, k),
        )
        for k, iid in enumerate(sim.intersection_ids)
    ]


def safe_metrics(log_) -> MetricsReport:
    """Metrics of a training episode; no arrivals scores as infinitely bad."""
    try:
        return finalize_metrics(log_)
    except NoArrivalsError:
        inf = float("inf")
        return MetricsReport(inf, inf, inf, inf, 0, len(log_.vehicles))


def train_run(sim, obs, cfg, episodes, seed, on_episode=None):
    agents = make_agents(sim, obs, cfg, seed)
    rng = np.random.default_rng(derive_seed(seed, 0xE7))
    logs = train_agents(agents, sim, episodes, rng, on_episode)
    return agents, logs


def greedy_eval(agents, sim, seed: int = 0):
    log_ = run_episode(agents, sim, "eval", np.random.default_rng(seed))
    return finalize_metrics(log_), log_


# -- grid search -------------------------------------------------------------------

GRID_FIELDS = ["rank", "combo", "gamma", "lr", "target_update", "score", "runs", "episodes",
               "run_scores", "ATT", "AD", "AWT", "AQL"]


def grid_search(
    spec: GridSpec,
    sim: Simulation,
    obs: ObservationConfig,
    master_seed: int = 0,
    base: AgentConfig = AgentConfig(),
    progress=None,
) -> tuple[AgentConfig, list[dict]]:
    """Train every (gamma, lr, target_update) combo `runs` times; lowest mean score wins.

    A run's score is its mean AWT over the final SELECTION_WINDOW training
    episodes; a combo's score is the mean over its runs.
    """
    rows = []
    for ci, (gamma, lr, tu) in enumerate(spec.combos()):
        cfg = AgentConfig(**{**base.to_dict(), "gamma": gamma, "lr": lr, "target_update": tu,
                             "hidden": base.hidden})
        run_scores = []
        episodes_seen = 0
        tails = {m: [] for m in METRICS}
        for r in range(spec.runs):
            _, logs = train_run(sim, obs, cfg, spec.episodes, derive_seed(master_seed, ci, r))
            episodes_seen += len(logs)
            tail = [safe_metrics(lg) for lg in logs[-SELECTION_WINDOW:]]
            run_scores.append(float(np.mean([getattr(m, SELECTION_METRIC) for m in tail])))
            for m in METRICS:
                tails[m].append(float(np.mean([getattr(t, m) for t in tail])))
            if progress:
                progress(ci, r, run_scores[-1])
        rows.append({
            "combo": ci, "gamma": gamma, "lr": lr, "target_update": tu,
            "score": float(np.mean(run_scores)), "runs": len(run_scores),
            "episodes": episodes_seen // len(run_scores),
            "run_scores": ";".join(repr(round(s, 10)) for s in run_scores),
            **{m: float(np.mean(tails[m])) for m in METRICS},
        })
    rows.sort(key=lambda r: (r["score"], r["combo"]))
    for i, r in enumerate(rows):
        r["rank"] = i + 1
    best = rows[0]
    cfg = AgentConfig(**{**base.to_dict(), "gamma": best["gamma"], "lr": best["lr"],
                         "target_update": best["target_update"], "hidden": base.hidden})
    return cfg, rows


def run_grid(cfg: ExperimentConfig, progress=None) -> tuple[AgentConfig, list[dict]]:
    spec = cfg.grid or DEFAULT_GRID
    sim = load_scenario(cfg.scenario)
    out = Path(cfg.out)
    best, rows = grid_search(spec, sim, cfg.obs, cfg.seeds[0], cfg.agent, progress)
    _write_csv(out / "ranking.csv", rows, GRID_FIELDS)
    _write_json(out / "best_config.json", best.to_dict())
    _write_json(out / "manifest.json", manifest(cfg, grid_size=spec.size,
                                                jobs=spec.size * spec.runs))
    return best, rows


# -- multi-seed training -----------------------------------------------------------

EPISODE_FIELDS_BASE = ["episode", "epsilon", "loss_mean", "ATT", "AWT", "AD", "AQL"]


@dataclass
class RunArtifacts:
    out: Path
    per_seed: dict[int, MetricsReport]
    best_seed: int
    checkpoints: dict[int, Path]

    @property
    def best(self) -> MetricsReport:
        return self.per_seed[self.best_seed]


def save_agents(agents, directory: Path, extra: dict) -> Path:
    for a in agents:
        save_checkpoint(a.net, directory / f"{a.intersection}.net",
                        {**extra, "intersection": a.intersection, "obs": asdict(a.obs_cfg),
                         "agent": a.cfg.to_dict()})
    return directory


def load_agents(directory: str | Path, sim: Simulation) -> tuple[list[DQNAgent], ObservationConfig]:
    directory = Path(directory)
    agents = []
    obs = None
    for iid in sim.intersection_ids:
        path = directory / f"{iid}.net"
        if not path.exists():
            raise ScenarioMismatchError(f"no checkpoint for intersection {iid!r} in {directory}")
        net, extra = load_checkpoint(path)
        obs = ObservationConfig(**extra["obs"])
        node = sim.intersection(iid)
        agents.append(DQNAgent(iid, obs, node.num_lanes, node.program.num_phases,
                               AgentConfig.from_dict(extra.get("agent", {})), net=net))
    return agents, obs


def select_best(per_seed: dict[int, MetricsReport]) -> int:
    return min(per_seed, key=lambda s: (getattr(per_seed[s], SELECTION_METRIC), s))


def train_experiment(cfg: ExperimentConfig, progress=None) -> RunArtifacts:
    """Per seed: train, checkpoint, greedy-evaluate; the best seed's row is reported."""
    sim = load_scenario(cfg.scenario)
    out = Path(cfg.out)
    per_seed: dict[int, MetricsReport] = {}
    ckpts: dict[int, Path] = {}
    for seed in cfg.seeds:
        sdir = out / f"seed_{seed}"
        rows = []
        agents_ref: list = []

        def on_episode(ep, lg, sdir=sdir, rows=rows, agents_ref=agents_ref):
            m = safe_metrics(lg)
            row = {"episode": ep + 1, "epsilon": lg.epsilon, "loss_mean": lg.loss_mean,
                   **{k: getattr(m, k) for k in ("ATT", "AWT", "AD", "AQL")}}
            for iid, r in zip(sim.intersection_ids, lg.rewards):
                row[f"reward_{iid}"] = r
            rows.append(row)
            if agents_ref and (ep + 1) % CHECKPOINT_EVERY == 0:
                save_agents(agents_ref[0], sdir / f"ckpt_ep{ep + 1:04d}",
                            {"episode": ep + 1, "seed": seed})
            if progress:
                progress(seed, ep, m)

        agents = make_agents(sim, cfg.obs, cfg.agent, seed)
        agents_ref.append(agents)
        rng = np.random.default_rng(derive_seed(seed, 0xE7))
        train_agents(agents, sim, cfg.episodes, rng, on_episode)
        fields = EPISODE_FIELDS_BASE[:1] + [f"reward_{i}" for i in sim.intersection_ids] + \
            EPISODE_FIELDS_BASE[1:]
        _write_csv(sdir / "episodes.csv", rows, fields)
        ckpts[seed] = save_agents(agents, sdir / "final", {"episode": cfg.episodes, "seed": seed})
        log_ = run_episode(agents, sim, "eval", np.random.default_rng(seed))
        per_seed[seed] = safe_metrics(log_)

    best = select_best(per_seed)
    rows = [per_seed[s].as_row(run_id=out.name, seed=s, repr=cfg.obs.kind, episode=cfg.episodes)
            for s in cfg.seeds]
    _write_csv(out / "metrics.csv", rows, CSV_FIELDS)
    _write_csv(out / "best.csv", [per_seed[best].as_row(
        run_id=out.name, seed=best, repr=cfg.obs.kind, episode=cfg.episodes)], CSV_FIELDS)
    _write_json(out / "manifest.json", manifest(cfg, best_seed=best))
    return RunArtifacts(out, per_seed, best, ckpts)


# -- evaluation --------------------------------------------------------------------


def build_controllers(controller: str, sim: Simulation, green: float = 30.0):
    if controller == "fixed-time":
        return [FixedTimeController(i, sim.intersection(i).program.num_phases, green,
                                    sim.intersection(i).program.yellow_duration)
                for i in sim.intersection_ids]
    if controller == "random":
        return [RandomController(i, sim.intersection(i).program.num_phases)
                for i in sim.intersection_ids]
    agents, _ = load_agents(controller, sim)
    return agents


def evaluate(controller: str, sim: Simulation, seeds: list[int], green: float = 30.0):
    """Greedy / deterministic episodes per seed for 'fixed-time', 'random' or a checkpoint dir."""
    ctrls = build_controllers(controller, sim, green)
    reports = []
    for seed in seeds:
        log_ = run_episode(ctrls, sim, "eval", np.random.default_rng(seed))
        reports.append(finalize_metrics(log_))
    return reports


def baseline_sanity(sim: Simulation, seeds: list[int]) -> tuple[float, float]:
    """Mean AWT of random and fixed-time control; warns when random is not worse."""
    rand = float(np.mean([m.AWT for m in evaluate("random", sim, seeds)]))
    fixed = float(np.mean([m.AWT for m in evaluate("fixed-time", sim, seeds)]))
    if not rand > fixed:
        warnings.warn(
            f"random AWT {rand:.2f} <= fixed-time AWT {fixed:.2f}: demand is too low to "
            "discriminate controllers", RuntimeWarning, stacklevel=2,
        )
    return rand, fixed


# -- pruning sweep -----------------------------------------------------------------


def prune_sweep(checkpoint_dir: str | Path, scenario: str | Path, seeds: list[int],
                levels=DEFAULT_LEVELS, out: str | Path | None = None):
    sim = load_scenario(scenario)
    agents, obs = load_agents(checkpoint_dir, sim)
    nets: dict[str, DenseNet] = {a.intersection: a.net for a in agents}
    report = sparsity_sweep(nets, obs, sim, seeds, levels)
    if out is not None:
        out = Path(out)
        _write_csv(out / "sparsity.csv", report.rows(), SPARSITY_FIELDS)
        _write_json(out / "manifest.json", manifest(
            {"checkpoint": str(checkpoint_dir), "scenario": str(scenario), "seeds": list(seeds),
             "levels": [float(x) for x in levels], "mode": "prune-sweep"}))
    return report


# -- reporting ---------------------------------------------------------------------

REPR_ORDER = {"count": 0, "wait": 1, "image": 2}
REPR_NAMES = {"count": "Number of vehicles", "wait": "Average waiting time",
              "image": "Image-like"}


class MissingArtifactsError(FileNotFoundError):
    pass


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report(run_dir: str | Path, out: str | Path | None = None) -> dict:
    """Representation comparison table and sparsity-curve data from a directory of runs."""
    root = Path(run_dir)
    if not root.is_dir():
        raise MissingArtifactsError(f"{root} is not a directory")
    out = Path(out) if out else root
    best_files = sorted(root.glob("**/best.csv"))
    sparsity_files = sorted(root.glob("**/sparsity.csv"))
    if not best_files and not sparsity_files:
        raise MissingArtifactsError(f"no best.csv or sparsity.csv under {root}")

    table = []
    for f in best_files:
        rows = _read_csv(f)
        if not rows or any(m not in rows[0] for m in METRICS):
            raise MissingArtifactsError(f"{f} is incomplete")
        r = rows[0]
        table.append({"repr": r["repr"], "run": str(f.parent.relative_to(root)),
                      **{m: float(r[m]) for m in METRICS}})
    table.sort(key=lambda r: (REPR_ORDER.get(r["repr"], 99), r["run"]))
    result: dict = {"comparison": table}
    if table:
        fields = ["repr", "run", *METRICS]
        ours = next((r for r in table if r["repr"] == "image"), None)
        if ours is not None:
            for r in table:
                for m in METRICS:
                    r[f"{m}_impr_pct"] = improvement(r[m], ours[m]) if r is not ours else 0.0
            fields += [f"{m}_impr_pct" for m in METRICS]
        _write_csv(out / "comparison.csv", table, fields)
        lines = ["| State representation | " + " | ".join(METRICS) + " |",
                 "|---|" + "---|" * len(METRICS)]
        for r in table:
            lines.append(f"| {REPR_NAMES.get(r['repr'], r['repr'])} | "
                         + " | ".join(f"{r[m]:.2f}" for m in METRICS) + " |")
        (out / "comparison.md").write_text("\n".join(lines) + "\n")

    if sparsity_files:
        curve = []
        for f in sparsity_files:
            rows = _read_csv(f)
            if not rows:
                raise MissingArtifactsError(f"{f} is empty")
            by_level: dict[float, list[dict]] = {}
            for r in rows:
                by_level.setdefault(float(r["level"]), []).append(r)
            for level in sorted(by_level):
                rs = by_level[level]
                curve.append({
                    "run": str(f.parent.relative_to(root)), "level": level,
                    "measured_sparsity": float(rs[0]["measured_sparsity"]),
                    "mean_reward": float(np.mean([float(r["mean_reward"]) for r in rs])),
                    **{m: float(np.mean([float(r[m]) for r in rs])) for m in METRICS},
                })
        _write_csv(out / "sparsity_curve.csv", curve,
                   ["run", "level", "measured_sparsity", "mean_reward", *METRICS])
        result["sparsity"] = curve
    return result


def improvement(base: float, ours: float) -> float:
    """Percentage reduction of `ours` relative to `base`; nan for a zero base."""
    if base == 0:
        return float("nan")
    return 100.0 * (base - ours) / base

"""Post-training global magnitude pruning and the sparsity sweep."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import MetricsReport
from .neural import DenseNet

DEFAULT_LEVELS = tuple(round(0.05 * k, 2) for k in range(11))


def prune_global_magnitude(net: DenseNet, sparsity: float) -> DenseNet:
    """Mask the floor(sparsity * |W|) smallest-magnitude weights across all layers.

    Biases are never pruned. Ties go to the earlier (layer, row, column).
    Returns a pruned copy; `net` is left untouched.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    out = net.copy()
    mags = np.concatenate([np.abs(ly.W * ly.mask).ravel() for ly in out.layers])
    live = np.concatenate([ly.mask.ravel() for ly in out.layers])
    k = int(np.floor(sparsity * mags.size + 1e-9))
    if k == 0:
        return out
    # magnitude, then already-masked first, then flat (layer, row, col) position
    order = np.lexsort((np.arange(mags.size), live, mags))
    keep = np.ones(mags.size)
    keep[order[:k]] = 0.0
    off = 0
    for ly in out.layers:
        n = ly.W.size
        ly.mask *= keep[off:off + n].reshape(ly.W.shape)
        off += n
    out.apply_masks()
    return out


def measured_sparsity(net: DenseNet) -> float:
    zeros = sum(int((ly.mask == 0).sum()) for ly in net.layers)
    return zeros / net.num_weights


@dataclass
class SparsityEntry:
    level: float
    measured: float
    seed: int
    metrics: MetricsReport
    mean_reward: float


@dataclass
class SparsityReport:
    entries: list[SparsityEntry] = field(default_factory=list)

    @property
    def levels(self) -> list[float]:
        return sorted({e.level for e in self.entries})

    def mean_reward(self, level: float) -> float:
        return float(np.mean([e.mean_reward for e in self.entries if e.level == level]))

    def mean_metric(self, level: float, name: str) -> float:
        return float(np.mean([getattr(e.metrics, name) for e in self.entries if e.level == level]))

    @property
    def baseline(self) -> list[SparsityEntry]:
        return [e for e in self.entries if e.level == 0.0]

    def rows(self) -> list[dict]:
        return [
            {
                "level": e.level,
                "measured_sparsity": e.measured,
                "seed": e.seed,
                "ATT": e.metrics.ATT,
                "AWT": e.metrics.AWT,
                "AD": e.metrics.AD,
                "AQL": e.metrics.AQL,
                "mean_reward": e.mean_reward,
            }
            for e in sorted(self.entries, key=lambda e: (e.level, e.seed))
        ]


SPARSITY_FIELDS = ["level", "measured_sparsity", "seed", "ATT", "AWT", "AD", "AQL", "mean_reward"]


def sparsity_sweep(
    nets: dict[str, DenseNet],
    obs_cfg,
    sim,
    seeds: list[int],
    levels=DEFAULT_LEVELS,
) -> SparsityReport:
    """Greedy evaluation of globally pruned copies of trained nets, no fine-tuning.

    `nets` maps intersection id to its trained Q-network; every level prunes a
    fresh copy of each.
    """
    from .dqn import DQNAgent, check_controllers, run_episode
    from .metrics import finalize_metrics

    levels = sorted(float(x) for x in levels)
    for s in levels:
        if not 0.0 <= s < 1.0:
            raise ValueError(f"sparsity level {s} outside [0, 1)")
    if sorted(nets) != sorted(sim.intersection_ids):
        raise ValueError(f"checkpoints cover {sorted(nets)}, scenario has {sim.intersection_ids}")
    report = SparsityReport()
    for level in levels:
        agents = []
        for iid in sim.intersection_ids:
            node = sim.intersection(iid)
            pruned = prune_global_magnitude(nets[iid], level)
            agents.append(DQNAgent(iid, obs_cfg, node.num_lanes, node.program.num_phases,
                                   net=pruned))
        check_controllers(agents, sim)
        measured = float(np.mean([measured_sparsity(a.net) for a in agents]))
        for seed in seeds:
            log = run_episode(agents, sim, "eval", np.random.default_rng(seed))
            report.entries.append(
                SparsityEntry(level, measured, seed, finalize_metrics(log),
                              float(np.mean(log.rewards)))
            )
    return report

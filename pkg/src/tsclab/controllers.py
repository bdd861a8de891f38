"""Baseline signal controllers sharing the agents' decision cadence."""

from __future__ import annotations

import numpy as np

from .sim import Simulation


class FixedTimeController:
    """Round-robin phases on a fixed cycle of ``green + yellow`` seconds per phase.

    The schedule is evaluated at each decision point, so phase changes land on
    the first decision at or after their nominal switch time.
    """

    learns = False
    obs_cfg = None

    def __init__(self, intersection: str, num_phases: int, green: float = 30.0,
                 yellow: float = 3.0, splits: list[float] | None = None):
        self.intersection = intersection
        self.num_actions = num_phases
        greens = list(splits) if splits is not None else [green] * num_phases
        if len(greens) != num_phases or any(g <= 0 for g in greens):
            raise ValueError("need one positive green time per phase")
        self.bounds = np.cumsum([g + yellow for g in greens])

    def decide(self, sim: Simulation, state, rng, eps: float = 0.0) -> int:
        t = sim.clock % self.bounds[-1]
        return int(np.searchsorted(self.bounds, t, side="right"))


class RandomController:
    learns = False
    obs_cfg = None

    def __init__(self, intersection: str, num_phases: int):
        self.intersection = intersection
        self.num_actions = num_phases

    def decide(self, sim: Simulation, state, rng: np.random.Generator, eps: float = 0.0) -> int:
        return int(rng.integers(self.num_actions))

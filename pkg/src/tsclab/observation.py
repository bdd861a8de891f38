"""State representations: per-lane vehicle count, per-lane mean wait, and the image-like array.

All three only see vehicles within the detection radius of the stop line.
The image-like state has shape ``(cells, lanes, 3)`` with channels
(presence, speed / v_norm, wait / wait_cap); cell ``k`` covers distances
``[k*c, (k+1)*c)`` from the stop line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sim import Simulation

KINDS = ("count", "wait", "image")
_ALIASES = {"vehicle-count": "count", "avg-wait": "wait", "image-like": "image"}


@dataclass(frozen=True)
class ObservationConfig:
    kind: str = "count"
    radius: float = 150.0
    cell_length: float = 7.5
    speed_norm: float | None = None  # None: network max speed limit
    wait_cap: float = 300.0
    channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "kind", _ALIASES.get(self.kind, self.kind))
        if self.kind not in KINDS:
            raise ValueError(f"unknown observation kind {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("radius must be > 0")
        if not self.cell_length > 0:
            raise ValueError("cell_length must be > 0")
        if self.kind == "image" and self.channels != 3:
            raise ValueError("image-like state uses exactly 3 channels")
        if self.wait_cap <= 0 or (self.speed_norm is not None and self.speed_norm <= 0):
            raise ValueError("normalizers must be > 0")

    @property
    def cells(self) -> int:
        return max(1, math.ceil(self.radius / self.cell_length))

    def shape(self, num_lanes: int) -> tuple[int, ...]:
        if self.kind == "image":
            return (self.cells, num_lanes, self.channels)
        return (num_lanes,)

    def dim(self, num_lanes: int) -> int:
        return int(np.prod(self.shape(num_lanes)))


def build_vector_count(sim: Simulation, intersection: str, cfg: ObservationConfig) -> np.ndarray:
    lanes = sim.vehicles_in_radius(intersection, cfg.radius)
    return np.array([len(seen) for seen in lanes], dtype=np.float64)


def build_vector_wait(sim: Simulation, intersection: str, cfg: ObservationConfig) -> np.ndarray:
    lanes = sim.vehicles_in_radius(intersection, cfg.radius)
    out = np.zeros(len(lanes))
    for i, seen in enumerate(lanes):
        if seen:
            out[i] = sum(w for _, _, w in seen) / len(seen)
    return out


def build_image(sim: Simulation, intersection: str, cfg: ObservationConfig) -> np.ndarray:
    lanes = sim.vehicles_in_radius(intersection, cfg.radius)
    C = cfg.cells
    img = np.zeros((C, len(lanes), 3))
    v_norm = cfg.speed_norm or sim.v_norm
    c = cfg.cell_length
    cap = cfg.wait_cap
    for i, seen in enumerate(lanes):
        if not seen:
            continue
        counts: dict[int, int] = {}
        for dist, speed, wait in seen:
            k = min(int(dist // c), C - 1)
            n = counts.get(k, 0)
            counts[k] = n + 1
            cell = img[k, i]
            cell[0] = 1.0
            # running mean over the vehicles sharing the cell
            cell[1] += (min(speed / v_norm, 1.0) - cell[1]) / (n + 1)
            w = min(wait / cap, 1.0)
            if w > cell[2]:
                cell[2] = w
    return img


_BUILDERS = {"count": build_vector_count, "wait": build_vector_wait, "image": build_image}


def observe(sim: Simulation, intersection: str, cfg: ObservationConfig) -> np.ndarray:
    """Flattened (row-major) state vector for the network input."""
    return _BUILDERS[cfg.kind](sim, intersection, cfg).reshape(-1)

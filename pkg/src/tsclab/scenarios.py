"""Built-in scenario templates: an isolated 4-approach junction and a 3-junction arterial.

Each junction has 4 approaches x 2 incoming lanes (lane 0 through+right,
lane 1 left) and a 4-phase program::

    0: N/S through+right   1: N/S left   2: E/W through+right   3: E/W left
"""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np

from .sim import SCHEMA_VERSION, Constants

DIRS = ("N", "E", "S", "W")
TURN_OFFSET = {"through": 2, "left": 1, "right": 3}
APPROACH_SPLIT = {"through": 0.5, "left": 0.25, "right": 0.25}
TEMPLATES = ("single4way", "arterial3")

LANE_LENGTH = 200.0
SPEED_LIMIT = 13.89


def _turn_dir(approach: str, turn: str) -> str:
    """Side of the junction a vehicle leaves by, given the side it arrives from."""
    return DIRS[(DIRS.index(approach) + TURN_OFFSET[turn]) % 4]


def _in_lane_for(turn: str) -> int:
    return 1 if turn == "left" else 0


class _Builder:
    def __init__(self, n_nodes: int):
        self.n = n_nodes
        self.lanes: dict[str, dict] = {}
        self.movements: list[tuple[str, str]] = []
        self.mv_turn: dict[tuple[str, str], tuple[int, str, str]] = {}

    def node_id(self, k: int) -> str:
        return "I" if self.n == 1 else f"I{k}"

    def neighbour(self, k: int, side: str) -> int | None:
        if side == "E" and k + 1 < self.n:
            return k + 1
        if side == "W" and k > 0:
            return k - 1
        return None

    def in_lane(self, k: int, side: str, idx: int) -> str:
        """Lane arriving at junction k from `side`."""
        nb = self.neighbour(k, side)
        if nb is None:
            return f"{self.node_id(k)}_{side}_in_{idx}"
        return f"{self.node_id(nb)}_{self.node_id(k)}_{idx}"

    def out_lane(self, k: int, side: str, idx: int) -> str:
        """Lane leaving junction k towards `side`."""
        nb = self.neighbour(k, side)
        if nb is None:
            return f"{self.node_id(k)}_{side}_out_{idx}"
        return f"{self.node_id(k)}_{self.node_id(nb)}_{idx}"

    def build(self) -> None:
        for k in range(self.n):
            nid = self.node_id(k)
            for side in DIRS:
                for idx in (0, 1):
                    lid = self.in_lane(k, side, idx)
                    self.lanes[lid] = {"id": lid, "length": LANE_LENGTH,
                                       "speed_limit": SPEED_LIMIT, "to": nid}
            for side in DIRS:
                for idx in (0, 1):
                    lid = self.out_lane(k, side, idx)
                    if lid not in self.lanes:
                        self.lanes[lid] = {"id": lid, "length": LANE_LENGTH,
                                           "speed_limit": SPEED_LIMIT, "to": None}
            for side in DIRS:
                for turn in TURN_OFFSET:
                    src = self.in_lane(k, side, _in_lane_for(turn))
                    exit_side = _turn_dir(side, turn)
                    internal = self.neighbour(k, exit_side) is not None
                    # internal links: either lane, chosen by the next turn
                    idxs = (0, 1) if internal else (0 if turn == "through" else 1,)
                    for idx in idxs:
                        mv = (src, self.out_lane(k, exit_side, idx))
                        self.movements.append(mv)
                        self.mv_turn[mv] = (k, side, turn)

    def incoming(self, k: int) -> list[str]:
        return [self.in_lane(k, side, idx) for side in DIRS for idx in (0, 1)]

    def phases(self, k: int) -> list[list[tuple[str, str]]]:
        groups = [
            (("N", "S"), ("through", "right")),
            (("N", "S"), ("left",)),
            (("E", "W"), ("through", "right")),
            (("E", "W"), ("left",)),
        ]
        out = []
        for sides, turns in groups:
            out.append(sorted(mv for mv, (kk, side, turn) in self.mv_turn.items()
                              if kk == k and side in sides and turn in turns))
        return out

    def conflicts(self) -> list[tuple[tuple[str, str], tuple[str, str]]]:
        out = []
        for a, b in itertools.combinations(sorted(self.mv_turn), 2):
            ka, sa, ta = self.mv_turn[a]
            kb, sb, tb = self.mv_turn[b]
            if ka != kb or sa == sb:
                continue
            if _turns_conflict(sa, ta, sb, tb) or (a[1] == b[1]):
                out.append((a, b))
        return out

    def route_lanes(self, k0: int, side: str, turns: list[str]) -> list[str]:
        """Lane path entering junction k0 from `side`, then taking `turns` at successive junctions."""
        lanes = [self.in_lane(k0, side, _in_lane_for(turns[0]))]
        k = k0
        for j, turn in enumerate(turns):
            exit_side = _turn_dir(side, turn)
            if j + 1 < len(turns):
                nxt = self.neighbour(k, exit_side)
                assert nxt is not None
                lanes.append(self.out_lane(k, exit_side, _in_lane_for(turns[j + 1])))
                side = {"E": "W", "W": "E"}[exit_side]
                k = nxt
            else:
                if self.neighbour(k, exit_side) is not None:
                    raise ValueError("route must end on a sink lane")
                lanes.append(self.out_lane(k, exit_side, 0 if turn == "through" else 1))
        return lanes


def _turns_conflict(sa: str, ta: str, sb: str, tb: str) -> bool:
    opposite = _turn_dir(sa, "through") == sb
    if ta == "right" or tb == "right":
        return False
    if opposite:
        return ta != tb  # left vs opposing through
    return True  # perpendicular through/left pairs cross


def _route_options(b: _Builder, k: int, side: str) -> list[tuple[list[str], float]]:
    """(turn sequence, probability) for vehicles entering junction k from an external side."""
    if b.n == 1 or side in ("N", "S"):
        opts = []
        for turn, p in APPROACH_SPLIT.items():
            turns = [turn]
            exit_side = _turn_dir(side, turn)
            kk = k
            while b.neighbour(kk, exit_side) is not None:
                kk = b.neighbour(kk, exit_side)
                turns.append("through")
            opts.append((turns, p))
        return opts
    # arterial entry: ride to the far end or turn off at one junction
    opts = [(["through"] * b.n, 0.5)]
    p_turn = 0.5 / (2 * b.n)
    for j in range(b.n):
        for turn in ("left", "right"):
            opts.append((["through"] * j + [turn], p_turn))
    return opts


def gen_scenario(
    template: str,
    demand: float,
    seed: int = 0,
    horizon: float = 3600.0,
    yellow: float = 3.0,
    interval: float = 5.0,
) -> dict:
    """Scenario document for a template at `demand` veh/h per external approach."""
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}; choose from {TEMPLATES}")
    n = 1 if template == "single4way" else 3
    doc = corridor_scenario(n, demand, seed, horizon, yellow, interval)
    doc["template"] = template
    return doc


def corridor_scenario(
    n: int,
    demand: float,
    seed: int = 0,
    horizon: float = 3600.0,
    yellow: float = 3.0,
    interval: float = 5.0,
) -> dict:
    """`n` four-approach junctions in an east-west line (n=1 is the isolated junction)."""
    if n < 1:
        raise ValueError("need at least one junction")
    if not demand > 0:
        raise ValueError(f"demand must be > 0 veh/h/approach, got {demand}")
    b = _Builder(n)
    b.build()

    routes: dict[str, list[str]] = {}
    entries: list[tuple[str, list[tuple[str, float]]]] = []
    for k in range(n):
        for side in DIRS:
            if b.neighbour(k, side) is not None:
                continue
            opts = []
            for turns, p in _route_options(b, k, side):
                rid = f"{b.node_id(k)}_{side}_" + "-".join(t[0] for t in turns)
                routes[rid] = b.route_lanes(k, side, turns)
                opts.append((rid, p))
            entries.append((f"{b.node_id(k)}_{side}", opts))

    rng = np.random.default_rng(seed)
    headway = 3600.0 / demand
    count = int(round(demand * horizon / 3600.0))
    demand_rows = []
    for _, opts in entries:
        rids = [r for r, _ in opts]
        probs = np.array([p for _, p in opts])
        jitter = rng.uniform(0.0, 1.0, size=count)
        picks = rng.choice(len(rids), size=count, p=probs / probs.sum())
        for j in range(count):
            t = round(float((j + jitter[j]) * headway), 3)
            demand_rows.append({"depart": min(t, horizon - 1e-3), "route": rids[picks[j]]})
    demand_rows.sort(key=lambda d: (d["depart"], d["route"]))

    c = Constants()
    return {
        "schema_version": SCHEMA_VERSION,
        "template": f"corridor{n}",
        "demand_level": demand,
        "seed": seed,
        "horizon": horizon,
        "constants": {
            "dt": c.dt, "a_max": c.a_max, "min_gap": c.min_gap,
            "vehicle_length": c.vehicle_length, "halt_threshold": c.halt_threshold,
        },
        "lanes": list(b.lanes.values()),
        "intersections": [
            {
                "id": b.node_id(k),
                "incoming": b.incoming(k),
                "phases": b.phases(k),
                "yellow_duration": yellow,
                "decision_interval": interval,
            }
            for k in range(n)
        ],
        "movements": sorted(b.movements),
        "conflicts": b.conflicts(),
        "routes": [{"id": rid, "lanes": lanes} for rid, lanes in routes.items()],
        "demand": demand_rows,
    }


def write_scenario(doc: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1))
    return path

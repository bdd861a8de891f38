"""Scenario builders and an invariant-checking stepper shared by the test modules."""

from __future__ import annotations

import copy
import functools

import numpy as np

from tsclab.scenarios import corridor_scenario
from tsclab.sim import SCHEMA_VERSION, Simulation, scenario_from_dict


def line_doc(length=100.0, vmax=10.0, demand=((0.0, "r"),), horizon=100.0) -> dict:
    """One sink lane, no intersections."""
    return {
        "schema_version": SCHEMA_VERSION,
        "horizon": horizon,
        "lanes": [{"id": "a", "length": length, "speed_limit": vmax, "to": None}],
        "intersections": [],
        "movements": [],
        "routes": [{"id": "r", "lanes": ["a"]}],
        "demand": [{"depart": t, "route": r} for t, r in demand],
    }


def tee_doc(length=100.0, vmax=10.0, yellow=3.0, interval=5.0, demand=(), horizon=100.0):
    """Junction J fed by lanes n and w, each continuing to its own sink.

    Phase 0 serves n->s, phase 1 serves w->e.
    """
    return {
        "schema_version": SCHEMA_VERSION,
        "horizon": horizon,
        "lanes": [
            {"id": "n", "length": length, "speed_limit": vmax, "to": "J"},
            {"id": "w", "length": length, "speed_limit": vmax, "to": "J"},
            {"id": "s", "length": length, "speed_limit": vmax, "to": None},
            {"id": "e", "length": length, "speed_limit": vmax, "to": None},
        ],
        "intersections": [{
            "id": "J", "incoming": ["n", "w"],
            "phases": [[["n", "s"]], [["w", "e"]]],
            "yellow_duration": yellow, "decision_interval": interval,
        }],
        "movements": [["n", "s"], ["w", "e"]],
        "conflicts": [[["n", "s"], ["w", "e"]]],
        "routes": [{"id": "ns", "lanes": ["n", "s"]}, {"id": "we", "lanes": ["w", "e"]}],
        "demand": [{"depart": t, "route": r} for t, r in demand],
    }


def sim_of(doc: dict) -> Simulation:
    return scenario_from_dict(doc)


@functools.lru_cache(maxsize=None)
def _corridor(n: int) -> dict:
    return corridor_scenario(n, 1800.0, seed=n, horizon=600.0)


def random_corridor(rng: np.random.Generator, n: int, horizon: float = 60.0) -> Simulation:
    """Corridor of n junctions with random lane lengths, limits, timings and demand."""
    doc = copy.deepcopy(_corridor(n))
    for lane in doc["lanes"]:
        lane["length"] = float(rng.uniform(15.0, 120.0))
        lane["speed_limit"] = float(rng.uniform(4.0, 20.0))
    yellow = float(rng.integers(0, 4))
    interval = float(rng.integers(max(1, int(yellow) + 1), 9))
    for node in doc["intersections"]:
        node["yellow_duration"] = yellow
        node["decision_interval"] = interval
    routes = [r["id"] for r in doc["routes"]]
    k = int(rng.integers(0, 4 * int(horizon) + 1))
    doc["demand"] = sorted(
        ({"depart": float(np.round(rng.uniform(0, horizon), 2)),
          "route": routes[int(rng.integers(len(routes)))]} for _ in range(k)),
        key=lambda d: d["depart"],
    )
    doc["horizon"] = horizon
    return scenario_from_dict(doc)


class InvariantViolation(AssertionError):
    pass


def _snapshot(sim: Simulation):
    lanes = {}
    for li, q in enumerate(sim.queues):
        lanes[li] = [(v.id, v.leg, v.pos, v.speed, v.waiting_time) for v in q]
    return lanes


def checked_step(sim: Simulation) -> None:
    """One step, asserting every simulator invariant across it."""
    c = sim.constants
    before = _snapshot(sim)
    greens = list(sim._green)
    yellow = [s.yellow_remaining for s in sim.signals]
    clock = sim.clock
    n_finished = len(sim.finished)
    where = {vid: (li, leg, w) for li, vs in before.items() for vid, leg, _, _, w in vs}

    sim.step()

    if abs(sim.clock - (clock + c.dt)) > 1e-9:
        raise InvariantViolation("clock did not advance by dt")
    if sim.spawned_total != sim.in_network + sim.arrived_total:
        raise InvariantViolation(
            f"conservation: {sim.spawned_total} != {sim.in_network} + {sim.arrived_total}"
        )
    for li, q in enumerate(sim.queues):
        length, vmax = sim._length[li], sim._vmax[li]
        prev_pos = np.inf
        for v in q:
            if not 0.0 <= v.pos <= length + 1e-9:
                raise InvariantViolation(f"vehicle {v.id} position {v.pos} outside lane {li}")
            if not 0.0 <= v.speed <= vmax + 1e-9:
                raise InvariantViolation(f"vehicle {v.id} speed {v.speed} outside [0, {vmax}]")
            if v.pos > prev_pos + 1e-9:
                raise InvariantViolation(f"lane {li}: vehicle {v.id} passed its leader")
            prev_pos = v.pos
            if v.id in where:
                old_li, old_leg, old_w = where[v.id]
                expect = old_w + (c.dt if v.speed < c.halt_threshold else 0.0)
                if abs(v.waiting_time - expect) > 1e-9:
                    raise InvariantViolation(f"vehicle {v.id}: waiting {old_w} -> {v.waiting_time}")
                if v.leg != old_leg:
                    node = sim._node[old_li]
                    g = greens[node]
                    if yellow[node] > 0 or g is None or (old_li, li) not in g:
                        raise InvariantViolation(
                            f"vehicle {v.id} crossed {old_li}->{li} on red/yellow"
                        )
        ids = [v.id for v in q]
        old_ids = [vid for vid, *_ in before[li] if vid in set(ids)]
        if [i for i in ids if i in set(old_ids)] != old_ids:
            raise InvariantViolation(f"lane {li}: vehicle order changed")
    for v in sim.finished[n_finished:]:
        if v.arrival_time != sim.clock or v.arrival_time < v.depart_time:
            raise InvariantViolation(f"vehicle {v.id} arrived before departing")


def random_episode(rng: np.random.Generator, n: int, horizon: float = 60.0) -> Simulation:
    """Run a random corridor under random actions, checking invariants every step."""
    sim = random_corridor(rng, n, horizon)
    interval = sim.intersection(sim.intersection_ids[0]).program.decision_interval
    steps = int(horizon)
    for t in range(steps):
        if t % int(interval) == 0:
            for iid in sim.intersection_ids:
                P = sim.intersection(iid).program.num_phases
                sim.apply_action(iid, int(rng.integers(P)))
        checked_step(sim)
    return sim


def random_net(rng: np.random.Generator, masked: bool = False):
    from tsclab.neural import init

    depth = int(rng.integers(2, 5))
    dims = [int(d) for d in rng.integers(1, 9, size=depth)]
    net = init(dims, int(rng.integers(2**31)))
    for ly in net.layers:
        ly.b[:] = rng.normal(0.0, 0.5, size=ly.b.shape)
        if masked:
            ly.mask[:] = rng.random(ly.mask.shape) > 0.3
    net.apply_masks()
    return net


def gradient_rel_error(net, x: np.ndarray, grad_out: np.ndarray, h: float = 1e-5) -> float:
    """Norm-wise relative error of backward() against central differences."""
    analytic = net.backward(x, grad_out).flat.copy()
    theta = net.theta
    numeric = np.zeros_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        fp = float(np.sum(grad_out * net.forward(x)))
        theta[i] = old - h
        fm = float(np.sum(grad_out * net.forward(x)))
        theta[i] = old
        numeric[i] = (fp - fm) / (2 * h)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def value_iteration(T, R, gamma, iters=5000):
    T, R = np.asarray(T), np.asarray(R, dtype=float)
    Q = np.zeros_like(R)
    for _ in range(iters):
        Q = R + gamma * Q.max(axis=1)[T]
    return Q


def train_tabular(T, R, gamma, seed=0, rounds=40, steps_per_round=150, lr=1e-3):
    """Fit a DQN agent on a deterministic MDP with one-hot states; returns its Q table.

    Every (s, a) transition sits in the replay buffer; the target net syncs
    once per round, so each round is one fitted Bellman backup.
    """
    from tsclab.dqn import AgentConfig, DQNAgent, Transition
    from tsclab.observation import ObservationConfig

    T, R = np.asarray(T), np.asarray(R, dtype=float)
    n, na = R.shape
    cfg = AgentConfig(gamma=gamma, lr=lr, batch_size=32, learn_start=1, buffer_capacity=64)
    agent = DQNAgent("mdp", ObservationConfig("count"), n, na, cfg, seed=seed)
    eye = np.eye(n)
    for s in range(n):
        for a in range(na):
            agent.remember(Transition(eye[s], a, R[s, a], eye[T[s, a]], False))
    rng = np.random.default_rng(seed)
    for _ in range(rounds):
        for _ in range(steps_per_round):
            agent.train_step(rng)
        agent.sync_target()
    return agent.net.forward(eye)


ACCEPTANCE_LINES: list[str] = []


class criterion:
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail or ("" if ok else f"{exc_type.__name__}: {exc}")
        line = f"criterion {self.number} [{'PASS' if ok else 'FAIL'}] {self.title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False

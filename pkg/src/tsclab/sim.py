"""Deterministic discrete-time microsimulator for signalized lane networks.

Vehicles follow a safe-speed rule::

    v_next = min(v + a_max*dt, v_max_lane, d_free/dt)

where ``d_free`` is the room to the leader's rear bumper minus ``min_gap``, or
the distance to the stop line when the vehicle may not cross it this step.
Crossing an intersection is instantaneous: an admitted vehicle reappears at
position 0 of its next lane, keeping its speed (capped at the new limit).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """Scenario failed validation; the message names the offending entity."""


class ScenarioParseError(ScenarioError):
    """Scenario file is not valid JSON or lacks required sections."""


@dataclass(frozen=True)
class Constants:
    dt: float = 1.0
    a_max: float = 2.0
    min_gap: float = 2.5
    vehicle_length: float = 5.0
    halt_threshold: float = 0.1

    @property
    def entry_length(self) -> float:
        return self.min_gap + self.vehicle_length


@dataclass(frozen=True)
class Lane:
    id: str
    length: float
    speed_limit: float
    to: str | None  # downstream intersection id, None for a sink


@dataclass(frozen=True)
class PhaseProgram:
    phases: tuple[frozenset[tuple[str, str]], ...]
    yellow_duration: float = 3.0
    decision_interval: float = 5.0

    @property
    def num_phases(self) -> int:
        return len(self.phases)


@dataclass(frozen=True)
class Intersection:
    id: str
    incoming: tuple[str, ...]
    program: PhaseProgram

    @property
    def num_lanes(self) -> int:
        return len(self.incoming)


@dataclass
class LaneNetwork:
    lanes: dict[str, Lane]
    intersections: dict[str, Intersection]
    movements: frozenset[tuple[str, str]]
    routes: dict[str, tuple[str, ...]]
    conflicts: frozenset[frozenset[tuple[str, str]]] = frozenset()

    def validate(self) -> None:
        for lane in self.lanes.values():
            if not lane.length > 0:
                raise ScenarioError(f"lane {lane.id!r}: length must be > 0, got {lane.length}")
            if not lane.speed_limit > 0:
                raise ScenarioError(
                    f"lane {lane.id!r}: speed_limit must be > 0, got {lane.speed_limit}"
                )
            if lane.to is not None and lane.to not in self.intersections:
                raise ScenarioError(f"lane {lane.id!r}: unknown downstream intersection {lane.to!r}")
        for node in self.intersections.values():
            if not node.incoming:
                raise ScenarioError(f"intersection {node.id!r}: needs at least one incoming lane")
            if len(set(node.incoming)) != len(node.incoming):
                raise ScenarioError(f"intersection {node.id!r}: duplicate incoming lane")
            for lid in node.incoming:
                if lid not in self.lanes:
                    raise ScenarioError(f"intersection {node.id!r}: unknown incoming lane {lid!r}")
                if self.lanes[lid].to != node.id:
                    raise ScenarioError(
                        f"intersection {node.id!r}: lane {lid!r} does not end at this intersection"
                    )
            if node.program.num_phases < 2:
                raise ScenarioError(f"intersection {node.id!r}: needs at least 2 phases")
            if node.program.yellow_duration < 0 or node.program.decision_interval <= 0:
                raise ScenarioError(f"intersection {node.id!r}: bad yellow/decision timing")
            for p, phase in enumerate(node.program.phases):
                for mv in phase:
                    if mv not in self.movements:
                        raise ScenarioError(
                            f"intersection {node.id!r} phase {p}: undeclared movement {mv}"
                        )
                    if mv[0] not in node.incoming:
                        raise ScenarioError(
                            f"intersection {node.id!r} phase {p}: movement {mv} does not start "
                            "on an incoming lane of this intersection"
                        )
                for pair in self.conflicts:
                    if pair <= phase:
                        a, b = sorted(pair)
                        raise ScenarioError(
                            f"intersection {node.id!r} phase {p}: conflicting movements {a} and {b}"
                        )
        for lane in self.lanes.values():
            if lane.to is not None and lane.id not in self.intersections[lane.to].incoming:
                raise ScenarioError(
                    f"lane {lane.id!r}: ends at {lane.to!r} but is not listed as incoming there"
                )
        for src, dst in self.movements:
            for lid in (src, dst):
                if lid not in self.lanes:
                    raise ScenarioError(f"movement {src}->{dst}: unknown lane {lid!r}")
            if self.lanes[src].to is None:
                raise ScenarioError(f"movement {src}->{dst}: {src!r} is a sink lane")
        for rid, path in self.routes.items():
            if not path:
                raise ScenarioError(f"route {rid!r}: empty")
            for lid in path:
                if lid not in self.lanes:
                    raise ScenarioError(f"route {rid!r}: unknown lane {lid!r}")
            for a, b in zip(path, path[1:]):
                if (a, b) not in self.movements:
                    raise ScenarioError(f"route {rid!r}: no movement joins {a!r} -> {b!r}")
            if self.lanes[path[-1]].to is not None:
                raise ScenarioError(f"route {rid!r}: last lane {path[-1]!r} is not a sink")


@dataclass(slots=True)
class Vehicle:
    id: int
    route: str
    path: tuple[int, ...]  # lane indices
    leg: int
    pos: float
    speed: float
    depart_time: float
    scheduled_depart: float
    waiting_time: float = 0.0
    arrival_time: float | None = None


@dataclass(slots=True)
class SignalState:
    phase: int = 0
    time_in_phase: float = 0.0
    yellow_remaining: float = 0.0
    pending: int | None = None


@dataclass
class StepEvents:
    spawned: list[int] = field(default_factory=list)
    arrived: list[int] = field(default_factory=list)


def free_flow_time(lengths: list[float], limits: list[float], c: Constants = Constants()) -> float:
    """Travel time of a lone vehicle from standstill along lanes under all-green signals.

    Replays the car-following rule for one unimpeded vehicle; it is the
    reference the delay metric subtracts.
    """
    dt = c.dt
    t = 0.0
    v = 0.0
    for k, (length, vmax) in enumerate(zip(lengths, limits)):
        x = 0.0
        v = min(v, vmax)
        last = k == len(lengths) - 1
        while True:
            v = min(v + c.a_max * dt, vmax)
            t += dt
            if x + v * dt >= length:
                break
            x += v * dt
        if last:
            return t
    return t


class Simulation:
    """World state plus the transition function (``step``)."""

    def __init__(
        self,
        network: LaneNetwork,
        demand: list[tuple[float, str]],
        constants: Constants = Constants(),
        seed: int = 0,
        horizon: float = 3600.0,
    ):
        network.validate()
        for depart, rid in demand:
            if rid not in network.routes:
                raise ScenarioError(f"demand entry at t={depart}: unknown route {rid!r}")
            if depart < 0:
                raise ScenarioError(f"demand entry for route {rid!r}: negative depart {depart}")
        self.network = network
        self.constants = constants
        self.seed = seed
        self.horizon = horizon
        self.demand = sorted(demand, key=lambda d: d[0])

        self.lane_ids = list(network.lanes)
        self.lane_index = {lid: i for i, lid in enumerate(self.lane_ids)}
        self.intersection_ids = list(network.intersections)
        node_index = {nid: i for i, nid in enumerate(self.intersection_ids)}
        lanes = [network.lanes[lid] for lid in self.lane_ids]
        self._length = [ln.length for ln in lanes]
        self._vmax = [ln.speed_limit for ln in lanes]
        self._node = [-1 if ln.to is None else node_index[ln.to] for ln in lanes]
        self._paths = {
            rid: tuple(self.lane_index[lid] for lid in path) for rid, path in network.routes.items()
        }
        self._incoming_idx = [
            [self.lane_index[lid] for lid in network.intersections[nid].incoming]
            for nid in self.intersection_ids
        ]
        self._phase_sets = []
        for nid in self.intersection_ids:
            prog = network.intersections[nid].program
            self._phase_sets.append(
                [
                    frozenset((self.lane_index[a], self.lane_index[b]) for a, b in ph)
                    for ph in prog.phases
                ]
            )
        self.v_norm = max(self._vmax)
        self.reset()

    # -- lifecycle -----------------------------------------------------------------

    def reset(self) -> None:
        self.clock = 0.0
        self.queues: list[list[Vehicle]] = [[] for _ in self.lane_ids]
        self.halted = [0] * len(self.lane_ids)  # refreshed by step()
        self.signals = [SignalState() for _ in self.intersection_ids]
        self._green: list[frozenset | None] = [ps[0] for ps in self._phase_sets]
        self._cursor = 0
        self._pending: list[tuple[float, str]] = []
        self._next_id = 0
        self.spawned_total = 0
        self.arrived_total = 0
        self.finished: list[Vehicle] = []

    # -- queries -------------------------------------------------------------------

    def intersection(self, iid: str) -> Intersection:
        try:
            return self.network.intersections[iid]
        except KeyError:
            raise KeyError(f"unknown intersection {iid!r}") from None

    def vehicles(self):
        for li, q in enumerate(self.queues):
            for v in q:
                yield li, v

    @property
    def in_network(self) -> int:
        return sum(len(q) for q in self.queues)

    def lane_vehicles(self, lane: str) -> list[Vehicle]:
        try:
            return self.queues[self.lane_index[lane]]
        except KeyError:
            raise KeyError(f"unknown lane {lane!r}") from None

    def lane_queue(self, lane: str) -> int:
        halt = self.constants.halt_threshold
        return sum(1 for v in self.lane_vehicles(lane) if v.speed < halt)

    def intersection_queue(self, iid: str) -> int:
        return sum(self.lane_queue(lid) for lid in self.intersection(iid).incoming)

    def queue_snapshot(self) -> list[int]:
        """Halted-vehicle totals per intersection as of the last step."""
        h = self.halted
        return [sum(h[i] for i in idx) for idx in self._incoming_idx]

    def vehicles_in_radius(
        self, iid: str, radius: float
    ) -> list[list[tuple[float, float, float]]]:
        """Per incoming lane, (distance to stop line, speed, waiting time) nearest-first."""
        if not radius > 0:
            raise ValueError(f"radius must be > 0, got {radius}")
        out = []
        for lid in self.intersection(iid).incoming:
            li = self.lane_index[lid]
            length = self._length[li]
            seen = [
                (length - v.pos, v.speed, v.waiting_time)
                for v in self.queues[li]
                if length - v.pos <= radius
            ]
            seen.sort()
            out.append(seen)
        return out

    def signal(self, iid: str) -> SignalState:
        self.intersection(iid)
        return self.signals[self.intersection_ids.index(iid)]

    # -- control -------------------------------------------------------------------

    def apply_action(self, iid: str, phase: int) -> None:
        node = self.intersection(iid)
        P = node.program.num_phases
        if not (0 <= phase < P) or isinstance(phase, bool):
            raise ValueError(f"intersection {iid!r}: phase {phase} outside 0..{P - 1}")
        k = self.intersection_ids.index(iid)
        sig = self.signals[k]
        target = sig.pending if sig.yellow_remaining > 0 else sig.phase
        if phase == target:
            return
        if node.program.yellow_duration > 0:
            sig.yellow_remaining = node.program.yellow_duration
            sig.pending = phase
            self._green[k] = None
        else:
            sig.phase = phase
            sig.time_in_phase = 0.0
            self._green[k] = self._phase_sets[k][phase]

    # -- dynamics ------------------------------------------------------------------

    def _spawn(self, events: StepEvents) -> None:
        demand = self.demand
        while self._cursor < len(demand) and demand[self._cursor][0] <= self.clock:
            self._pending.append(demand[self._cursor])
            self._cursor += 1
        if not self._pending:
            return
        entry = self.constants.entry_length
        waiting = []
        for dep, rid in self._pending:
            path = self._paths[rid]
            q = self.queues[path[0]]
            if q and q[-1].pos < entry:
                waiting.append((dep, rid))
                continue
            v = Vehicle(self._next_id, rid, path, 0, 0.0, 0.0, self.clock, dep)
            self._next_id += 1
            q.append(v)
            self.spawned_total += 1
            events.spawned.append(v.id)
        self._pending = waiting

    def step(self) -> StepEvents:
        c = self.constants
        dt = c.dt
        acc = c.a_max * dt
        min_gap = c.min_gap
        veh_len = c.vehicle_length
        halt = c.halt_threshold
        entry = c.entry_length
        new_clock = self.clock + dt
        events = StepEvents()

        self._spawn(events)

        queues = self.queues
        entry_free = [not q or q[-1].pos >= entry for q in queues]
        reserved: set[int] = set()
        crossing: list[tuple[Vehicle, int]] = []
        halted = [0] * len(queues)

        for li, q in enumerate(queues):
            if not q:
                continue
            length = self._length[li]
            vmax = self._vmax[li]
            green = self._green[self._node[li]] if self._node[li] >= 0 else None
            leader_rear = math.inf
            removed = 0
            for k, v in enumerate(q):
                s = v.speed + acc
                if s > vmax:
                    s = vmax
                room = leader_rear - min_gap - v.pos
                if s * dt > room:
                    s = room / dt
                last = v.leg == len(v.path) - 1
                crossed = False
                if not last and v.pos + s * dt >= length:
                    dest = v.path[v.leg + 1]
                    if (
                        k == 0
                        and green is not None
                        and (li, dest) in green
                        and entry_free[dest]
                        and dest not in reserved
                    ):
                        reserved.add(dest)
                        crossed = True
                    else:
                        s = (length - v.pos) / dt
                if s < 0.0:
                    s = 0.0
                v.speed = s
                v.pos += s * dt
                if s < halt:
                    v.waiting_time += dt
                leader_rear = v.pos - veh_len
                if crossed:
                    crossing.append((v, dest))
                    removed += 1
                elif last and v.pos >= length:
                    v.pos = length
                    v.arrival_time = new_clock
                    self.finished.append(v)
                    self.arrived_total += 1
                    events.arrived.append(v.id)
                    removed += 1
                else:
                    if v.pos > length:
                        v.pos = length
                    if s < halt:
                        halted[li] += 1
            if removed:
                del q[:removed]

        for v, dest in crossing:
            v.leg += 1
            v.pos = 0.0
            if v.speed > self._vmax[dest]:
                v.speed = self._vmax[dest]
            if v.speed < halt:
                halted[dest] += 1
            queues[dest].append(v)
        self.halted = halted

        for k, sig in enumerate(self.signals):
            sig.time_in_phase += dt
            if sig.yellow_remaining > 0:
                sig.yellow_remaining -= dt
                if sig.yellow_remaining <= 1e-9:
                    sig.yellow_remaining = 0.0
                    sig.phase = sig.pending
                    sig.pending = None
                    sig.time_in_phase = 0.0
                    self._green[k] = self._phase_sets[k][sig.phase]

        self.clock = new_clock
        return events

    def insert_vehicle(self, route: str, pos: float = 0.0, speed: float = 0.0, leg: int = 0,
                       waiting_time: float = 0.0) -> Vehicle:
        """Place a vehicle directly (tests, warm starts); counts as a spawn now."""
        if route not in self._paths:
            raise KeyError(f"unknown route {route!r}")
        path = self._paths[route]
        if not 0 <= leg < len(path):
            raise ValueError(f"route {route!r} has no leg {leg}")
        li = path[leg]
        if not 0.0 <= pos <= self._length[li] or not 0.0 <= speed <= self._vmax[li]:
            raise ValueError("position or speed outside the lane's bounds")
        v = Vehicle(self._next_id, route, path, leg, float(pos), float(speed), self.clock,
                    self.clock, float(waiting_time))
        self._next_id += 1
        q = self.queues[li]
        k = 0
        while k < len(q) and q[k].pos >= pos:
            k += 1
        q.insert(k, v)
        self.spawned_total += 1
        if speed < self.constants.halt_threshold:
            self.halted[li] += 1
        return v

    def run(self, steps: int) -> None:
        for _ in range(steps):
            self.step()

    # -- bookkeeping ---------------------------------------------------------------

    def route_free_flow_time(self, rid: str) -> float:
        path = self._paths[rid]
        return free_flow_time(
            [self._length[i] for i in path], [self._vmax[i] for i in path], self.constants
        )

    def digest(self) -> str:
        """Hash of positions, speeds, waits, signals and clock."""
        h = hashlib.sha256()
        h.update(struct.pack("<d", self.clock))
        for li, v in sorted(self.vehicles(), key=lambda t: t[1].id):
            h.update(struct.pack("<qqqddd", v.id, li, v.leg, v.pos, v.speed, v.waiting_time))
        for s in self.signals:
            h.update(
                struct.pack(
                    "<qddq", s.phase, s.time_in_phase, s.yellow_remaining,
                    -1 if s.pending is None else s.pending,
                )
            )
        h.update(struct.pack("<qq", self.spawned_total, self.arrived_total))
        return h.hexdigest()

    def copy_fresh(self) -> Simulation:
        """A new simulation over the same scenario at clock 0."""
        return Simulation(self.network, list(self.demand), self.constants, self.seed, self.horizon)


# -- scenario files ---------------------------------------------------------------


def _mv(pair: Any, where: str) -> tuple[str, str]:
    if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
        raise ScenarioParseError(f"{where}: movement must be a [from, to] pair, got {pair!r}")
    return (str(pair[0]), str(pair[1]))


def scenario_from_dict(doc: dict, seed: int = 0) -> Simulation:
    if not isinstance(doc, dict):
        raise ScenarioParseError("scenario root must be an object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioParseError(f"unsupported schema_version {version!r}")
    for key in ("lanes", "intersections", "movements", "routes"):
        if key not in doc:
            raise ScenarioParseError(f"missing section {key!r}")
    try:
        constants = Constants(**doc.get("constants", {}))
    except TypeError as exc:
        raise ScenarioParseError(f"constants: {exc}") from None

    lanes = {}
    for entry in doc["lanes"]:
        try:
            lane = Lane(str(entry["id"]), float(entry["length"]), float(entry["speed_limit"]),
                        entry.get("to"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioParseError(f"lane entry {entry!r}: {exc}") from None
        if lane.id in lanes:
            raise ScenarioError(f"lane {lane.id!r}: duplicate id")
        lanes[lane.id] = lane

    nodes = {}
    for entry in doc["intersections"]:
        try:
            nid = str(entry["id"])
            phases = tuple(
                frozenset(_mv(m, f"intersection {nid!r}") for m in ph) for ph in entry["phases"]
            )
            prog = PhaseProgram(
                phases,
                float(entry.get("yellow_duration", 3.0)),
                float(entry.get("decision_interval", 5.0)),
            )
            nodes[nid] = Intersection(nid, tuple(str(x) for x in entry["incoming"]), prog)
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioParseError(f"intersection entry: {exc}") from None

    movements = frozenset(_mv(m, "movements") for m in doc["movements"])
    conflicts = frozenset(
        frozenset((_mv(a, "conflicts"), _mv(b, "conflicts"))) for a, b in doc.get("conflicts", [])
    )
    routes = {}
    for entry in doc["routes"]:
        try:
            routes[str(entry["id"])] = tuple(str(x) for x in entry["lanes"])
        except (KeyError, TypeError) as exc:
            raise ScenarioParseError(f"route entry {entry!r}: {exc}") from None
    try:
        demand = [(float(d["depart"]), str(d["route"])) for d in doc.get("demand", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioParseError(f"demand: {exc}") from None

    net = LaneNetwork(lanes, nodes, movements, routes, conflicts)
    return Simulation(net, demand, constants, seed=seed, horizon=float(doc.get("horizon", 3600.0)))


def load_scenario(path: str | Path, seed: int = 0) -> Simulation:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{path}: {exc}") from None
    return scenario_from_dict(doc, seed=seed)

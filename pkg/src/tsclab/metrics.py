"""Reward and the four evaluation metrics (ATT, AWT, AD, AQL)."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .sim import Simulation


class NoArrivalsError(RuntimeError):
    """Episode ended with zero arrived vehicles; travel metrics are undefined."""


def reward(sim: Simulation, intersection: str) -> float:
    """Negative total queue over the intersection's incoming lanes."""
    return -float(sim.intersection_queue(intersection))


@dataclass
class VehicleRecord:
    depart_time: float
    arrival_time: float | None
    expected_travel_time: float
    waiting_time: float


@dataclass
class EpisodeLog:
    vehicles: list[VehicleRecord] = field(default_factory=list)
    # per step: queue sum per intersection
    queue_sums: list[list[int]] = field(default_factory=list)
    lanes_per_intersection: list[int] = field(default_factory=list)
    length: float = 0.0
    rewards: list[float] = field(default_factory=list)  # cumulative, per agent
    loss_mean: float = float("nan")
    epsilon: float = 0.0


class EpisodeRecorder:
    """Collects per-step queue snapshots while a simulation runs."""

    def __init__(self, sim: Simulation):
        self.sim = sim
        self.ids = list(sim.intersection_ids)
        self.queue_sums: list[list[int]] = []

    def record(self) -> None:
        self.queue_sums.append(self.sim.queue_snapshot())

    def finish(self) -> EpisodeLog:
        sim = self.sim
        cache: dict[str, float] = {}

        def expected(rid: str) -> float:
            if rid not in cache:
                cache[rid] = sim.route_free_flow_time(rid)
            return cache[rid]

        recs = [
            VehicleRecord(v.depart_time, v.arrival_time, expected(v.route), v.waiting_time)
            for v in sim.finished
        ]
        recs += [
            VehicleRecord(v.depart_time, None, expected(v.route), v.waiting_time)
            for _, v in sim.vehicles()
        ]
        return EpisodeLog(
            vehicles=recs,
            queue_sums=self.queue_sums,
            lanes_per_intersection=[sim.intersection(i).num_lanes for i in self.ids],
            length=sim.clock,
        )


@dataclass
class MetricsReport:
    ATT: float
    AWT: float
    AD: float
    AQL: float
    arrived: int
    unfinished: int

    def as_row(self, **keys) -> dict:
        return {**keys, **asdict(self)}


CSV_FIELDS = ["run_id", "seed", "repr", "episode", "ATT", "AWT", "AD", "AQL", "arrived", "unfinished"]


def finalize_metrics(log: EpisodeLog) -> MetricsReport:
    done = [r for r in log.vehicles if r.arrival_time is not None]
    unfinished = len(log.vehicles) - len(done)
    if not done:
        raise NoArrivalsError(f"no vehicle arrived ({unfinished} unfinished)")
    travel = np.array([r.arrival_time - r.depart_time for r in done])
    expected = np.array([r.expected_travel_time for r in done])
    waits = np.array([r.waiting_time for r in done])
    if log.queue_sums and log.lanes_per_intersection:
        q = np.asarray(log.queue_sums, dtype=np.float64)
        lanes = np.asarray(log.lanes_per_intersection, dtype=np.float64)
        aql = float((q / lanes).mean(axis=0).mean())
    else:
        aql = 0.0
    return MetricsReport(
        ATT=float(travel.mean()),
        AWT=float(waits.mean()),
        AD=float((travel - expected).mean()),
        AQL=aql,
        arrived=len(done),
        unfinished=unfinished,
    )


def write_metrics_csv(rows: list[dict], fields: list[str] = CSV_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 10))
    return v

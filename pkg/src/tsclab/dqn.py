"""DQN controller: replay buffer, epsilon-greedy acting, TD targets, target-network sync.

One independent learner per intersection; agents never share parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .metrics import EpisodeLog, EpisodeRecorder, reward
from .neural import DenseNet, OptState, fused_q_update, init, is_standard, opt_step
from .observation import ObservationConfig, observe
from .sim import Simulation


class ScenarioMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.95
    lr: float = 1e-3
    target_update: int = 10  # episodes
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.8  # share of training episodes spent annealing
    buffer_capacity: int = 50_000
    batch_size: int = 64
    learn_start: int = 1_000
    train_every: int = 1  # decision steps
    hidden: tuple[int, ...] = (128, 64)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.target_update < 1:
            raise ValueError("target_update must be >= 1 episode")
        for e in (self.eps_start, self.eps_end):
            if not 0.0 <= e <= 1.0:
                raise ValueError(f"epsilon must lie in [0, 1], got {e}")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.train_every < 1:
            raise ValueError("batch_size, buffer_capacity and train_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AgentConfig:
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def epsilon_at(episode: int, total_episodes: int, cfg: AgentConfig) -> float:
    """Linear anneal from eps_start to eps_end over the first eps_decay_frac of training."""
    horizon = max(1, int(round(cfg.eps_decay_frac * total_episodes)))
    if episode >= horizon:
        return cfg.eps_end
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * episode / horizon


class Transition(NamedTuple):
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    truncated: bool


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    truncated: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring of transitions, sampled uniformly with replacement."""

    def __init__(self, capacity: int, state_dim: int):
        self.capacity = capacity
        self.state_dim = state_dim
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        i = self.cursor
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.truncated[i] = t.truncated
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = self.sample_indices(n, rng)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.truncated[idx])


def td_target(batch: Batch, target_net: DenseNet, gamma: float) -> np.ndarray:
    """r + gamma * max_a Q_target(s', a). Truncated transitions still bootstrap."""
    q_next = target_net.forward(batch.next_states)
    return batch.rewards + gamma * q_next.max(axis=1)


def greedy(q: np.ndarray) -> int:
    return int(np.argmax(q))  # first maximum wins ties


class DQNAgent:
    learns = True

    def __init__(
        self,
        intersection: str,
        obs_cfg: ObservationConfig,
        num_lanes: int,
        num_actions: int,
        cfg: AgentConfig = AgentConfig(),
        seed: int = 0,
        net: DenseNet | None = None,
    ):
        self.intersection = intersection
        self.obs_cfg = obs_cfg
        self.num_lanes = num_lanes
        self.num_actions = num_actions
        self.cfg = cfg
        self.state_dim = obs_cfg.dim(num_lanes)
        self.net = net if net is not None else init(
            [self.state_dim, *cfg.hidden, num_actions], seed
        )
        if self.net.input_dim != self.state_dim or self.net.output_dim != num_actions:
            raise ScenarioMismatchError(
                f"{intersection}: network {self.net.dims} does not fit "
                f"state dim {self.state_dim} / {num_actions} actions"
            )
        self.target = self.net.copy()
        self.opt = OptState.for_net(self.net, lr=cfg.lr)
        self._buffer: ReplayBuffer | None = None
        self.sync_count = 0
        self.updates = 0

    @property
    def buffer(self) -> ReplayBuffer:
        # allocated on first use so eval-only agents stay small
        if self._buffer is None:
            self._buffer = ReplayBuffer(self.cfg.buffer_capacity, self.state_dim)
        return self._buffer

    def q_values(self, state: np.ndarray) -> np.ndarray:
        return self.net.forward(state)

    def act(self, state: np.ndarray, eps: float, rng: np.random.Generator) -> int:
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (self.state_dim,):
            raise ValueError(f"state has shape {state.shape}, agent expects ({self.state_dim},)")
        if eps > 0 and rng.random() < eps:
            return int(rng.integers(self.num_actions))
        return greedy(self.net.forward(state))

    def decide(self, sim: Simulation, state, rng, eps: float) -> int:
        return self.act(state, eps, rng)

    def remember(self, t: Transition) -> None:
        self.buffer.add(t)

    def train_step(self, rng: np.random.Generator) -> float | None:
        """One minibatch update; None when the buffer is below learn_start."""
        buf = self.buffer
        if len(buf) < max(1, self.cfg.learn_start):
            return None
        batch = buf.sample(self.cfg.batch_size, rng)
        if is_standard(self.net):
            self.updates += 1
            return fused_q_update(self.net, self.target, self.opt, batch.states, batch.actions,
                                  batch.rewards, batch.next_states, self.cfg.gamma)
        y = td_target(batch, self.target, self.cfg.gamma)
        q, cache = self.net.forward(batch.states, keep=True)
        rows = np.arange(len(y))
        diff = q[rows, batch.actions] - y
        grad = np.zeros_like(q)
        grad[rows, batch.actions] = 2.0 * diff / len(y)
        opt_step(self.net, self.opt, self.net.backward(batch.states, grad, cache))
        self.updates += 1
        return float(np.mean(diff * diff))

    def sync_target(self) -> None:
        self.target = self.net.copy()
        self.sync_count += 1


def check_controllers(controllers, sim: Simulation) -> float:
    """Validate controllers against the scenario; returns the shared decision interval."""
    ids = [c.intersection for c in controllers]
    if sorted(ids) != sorted(sim.intersection_ids) or len(set(ids)) != len(ids):
        raise ScenarioMismatchError(
            f"controllers cover {ids}, scenario has intersections {sim.intersection_ids}"
        )
    intervals = set()
    for c in controllers:
        node = sim.intersection(c.intersection)
        intervals.add(node.program.decision_interval)
        if getattr(c, "num_lanes", node.num_lanes) != node.num_lanes:
            raise ScenarioMismatchError(
                f"{c.intersection}: controller built for {c.num_lanes} lanes, scenario has "
                f"{node.num_lanes}"
            )
        if getattr(c, "num_actions", node.program.num_phases) != node.program.num_phases:
            raise ScenarioMismatchError(
                f"{c.intersection}: controller has {c.num_actions} actions, scenario has "
                f"{node.program.num_phases} phases"
            )
    if len(intervals) != 1:
        raise ScenarioMismatchError(f"intersections disagree on decision interval: {intervals}")
    return intervals.pop()


def run_episode(
    controllers,
    sim: Simulation,
    mode: str,
    rng: np.random.Generator,
    eps: float = 0.0,
) -> EpisodeLog:
    """Play one full-horizon episode from a reset simulation.

    In ``train`` mode learners act epsilon-greedily, store transitions and
    update every ``train_every`` decisions; ``eval`` is greedy and read-only.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    interval = check_controllers(controllers, sim)
    dt = sim.constants.dt
    steps_per = int(round(interval / dt))
    n_decisions = int(round(sim.horizon / interval))

    sim.reset()
    rec = EpisodeRecorder(sim)
    obs = [c.obs_cfg if getattr(c, "obs_cfg", None) else None for c in controllers]
    states = [observe(sim, c.intersection, o) if o else None for c, o in zip(controllers, obs)]
    totals = [0.0] * len(controllers)
    losses: list[float] = []

    for d in range(n_decisions):
        actions = [
            c.decide(sim, s, rng, eps if training else 0.0) for c, s in zip(controllers, states)
        ]
        for c, a in zip(controllers, actions):
            sim.apply_action(c.intersection, a)
        for _ in range(steps_per):
            sim.step()
            rec.record()
        truncated = d == n_decisions - 1
        next_states = []
        for j, c in enumerate(controllers):
            r = reward(sim, c.intersection)
            totals[j] += r
            s2 = observe(sim, c.intersection, obs[j]) if obs[j] else None
            next_states.append(s2)
            if training and getattr(c, "learns", False):
                c.remember(Transition(states[j], actions[j], r, s2, truncated))
                if d % c.cfg.train_every == 0:
                    loss = c.train_step(rng)
                    if loss is not None:
                        losses.append(loss)
        states = next_states

    log = rec.finish()
    log.rewards = totals
    log.loss_mean = float(np.mean(losses)) if losses else float("nan")
    log.epsilon = eps if training else 0.0
    return log


def train_agents(
    agents: list[DQNAgent],
    sim: Simulation,
    episodes: int,
    rng: np.random.Generator,
    on_episode=None,
) -> list[EpisodeLog]:
    """Run `episodes` training episodes; syncs each target every cfg.target_update episodes."""
    logs = []
    for ep in range(episodes):
        eps = epsilon_at(ep, episodes, agents[0].cfg)
        log = run_episode(agents, sim, "train", rng, eps=eps)
        for a in agents:
            if (ep + 1) % a.cfg.target_update == 0:
                a.sync_target()
        logs.append(log)
        if on_episode is not None:
            on_episode(ep, log)
    return logs

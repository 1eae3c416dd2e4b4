"""Tabular Q-learning, plus a small chain MDP with a value-iteration solver for checking it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from ..sim_core import Observation
from .common import Transition, epsilon_greedy, linear_schedule


@dataclass(frozen=True)
class Discretizer:
    """Per-dimension uniform bins; values outside the range land in the end bins."""

    lows: tuple[float, ...]
    highs: tuple[float, ...]
    bins: tuple[int, ...]

    def index(self, x) -> tuple[int, ...]:
        out = []
        for v, lo, hi, n in zip(x, self.lows, self.highs, self.bins):
            i = int(np.floor((v - lo) / (hi - lo) * n))
            out.append(min(max(i, 0), n - 1))
        return tuple(out)


DEFAULT_DISCRETIZER = Discretizer(lows=(-1.2, 0.0), highs=(1.2, 30.0), bins=(11, 5))


@dataclass
class QTable:
    n_actions: int
    discretizer: Discretizer | None = None
    values: dict[tuple[Hashable, int], float] = field(default_factory=dict)

    def key(self, obs) -> Hashable:
        return self.discretizer.index(obs) if self.discretizer is not None else obs

    def get(self, state: Hashable, action: int) -> float:
        return self.values.get((state, action), 0.0)

    def row(self, state: Hashable) -> np.ndarray:
        return np.array([self.get(state, a) for a in range(self.n_actions)])


def q_update(table: QTable, t: Transition, alpha: float, gamma: float) -> QTable:
    """Q(s,a) += alpha * (r + gamma * max_a' Q(s',a') - Q(s,a)); no bootstrap on terminal."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    if not 0 <= gamma < 1:
        raise ValueError("gamma must be in [0, 1)")
    s, s2 = table.key(t.obs), table.key(t.next_obs)
    target = t.reward if t.terminal else t.reward + gamma * float(np.max(table.row(s2)))
    q = table.get(s, t.action)
    table.values[(s, t.action)] = q + alpha * (target - q)
    return table


@dataclass(frozen=True)
class ChainMdp:
    """Deterministic chain 0..n-1. Action 1 moves right, 0 moves left (floored at 0).

    Stepping right from n-2 enters the terminal state n-1 with reward 1;
    every other step pays ``step_reward``.
    """

    n_states: int = 5
    step_reward: float = 0.0
    goal_reward: float = 1.0

    n_actions = 2

    def step(self, s: int, a: int) -> tuple[int, float, bool]:
        s2 = s + 1 if a == 1 else max(s - 1, 0)
        if s2 == self.n_states - 1:
            return s2, self.goal_reward, True
        return s2, self.step_reward, False


def value_iteration(mdp: ChainMdp, gamma: float, tol: float = 1e-14, max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q*(s, a) for the non-terminal states, shape (n_states - 1, 2)."""
    n = mdp.n_states - 1
    q = np.zeros((n, mdp.n_actions))
    for _ in range(max_iter):
        new = np.empty_like(q)
        for s in range(n):
            for a in range(mdp.n_actions):
                s2, r, done = mdp.step(s, a)
                new[s, a] = r if done else r + gamma * q[s2].max()
        if np.max(np.abs(new - q)) < tol:
            return new
        q = new
    return q


def run_chain_q_learning(mdp: ChainMdp, steps: int, alpha: float, gamma: float, epsilon: float,
                         rng: np.random.Generator) -> QTable:
    table = QTable(mdp.n_actions)
    s = 0
    for _ in range(steps):
        a = epsilon_greedy(table.row(s), epsilon, rng)
        s2, r, done = mdp.step(s, a)
        q_update(table, Transition(s, a, r, s2, done), alpha, gamma)
        s = 0 if done else s2
    return table


def table_array(table: QTable, n_states: int) -> np.ndarray:
    return np.array([table.row(s) for s in range(n_states)])


@dataclass(frozen=True)
class QTableConfig:
    alpha: float = 0.1
    gamma: float = 0.95
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5


class TabularAgent:
    """Q-table over discretised (track_pos, speed_x)."""

    kind = "qtable"

    def __init__(self, n_actions: int, cfg: QTableConfig, total_steps: int, explore_rng: np.random.Generator,
                 discretizer: Discretizer = DEFAULT_DISCRETIZER):
        self.cfg = cfg
        self.table = QTable(n_actions, discretizer)
        self.explore_rng = explore_rng
        self.total_steps = total_steps
        self.steps = 0

    @staticmethod
    def featurize(obs: Observation) -> tuple[float, float]:
        return (obs.track_pos, obs.speed_x)

    @property
    def epsilon(self) -> float:
        duration = int(self.cfg.eps_fraction * self.total_steps)
        return linear_schedule(self.cfg.eps_start, self.cfg.eps_end, duration, self.steps)

    def begin_episode(self) -> None:
        pass

    def act(self, x, explore: bool = True) -> int:
        q = self.table.row(self.table.key(x))
        if not explore:
            return int(np.argmax(q))
        return epsilon_greedy(q, self.epsilon, self.explore_rng)

    def learn(self, t: Transition) -> float:
        s = self.table.key(t.obs)
        before = self.table.get(s, t.action)
        q_update(self.table, t, self.cfg.alpha, self.cfg.gamma)
        self.steps += 1
        return (self.table.get(s, t.action) - before) ** 2

    def state_tensors(self) -> dict[str, np.ndarray]:
        items = sorted(self.table.values.items())
        if not items:
            return {}
        keys = np.array([[*s, a] for (s, a), _ in items], dtype=float)
        return {"qtable.keys": keys, "qtable.values": np.array([v for _, v in items])}

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.table.values.clear()
        if "qtable.keys" not in tensors:
            return
        for row, v in zip(tensors["qtable.keys"], tensors["qtable.values"]):
            *s, a = (int(k) for k in row)
            self.table.values[(tuple(s), a)] = float(v)

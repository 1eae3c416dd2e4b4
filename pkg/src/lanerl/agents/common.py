from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Any, Sequence

import numpy as np


@dataclass(frozen=True)
class Transition:
    obs: Any
    action: Any
    reward: float
    next_obs: Any
    terminal: bool
    step: int | None = None


@dataclass(frozen=True)
class EpisodeResult:
    steps: int
    total_reward: float
    on_track_fraction: float
    mean_abs_steer_delta: float
    departed: bool
    lap_completed: bool


METRIC_COLUMNS = ("episode", "steps", "total_reward", "on_track_fraction", "mean_abs_steer_delta",
                  "departed", "lap_completed", "epsilon", "loss_mean")


class EpisodeTracker:
    """Accumulates per-step quantities into an EpisodeResult."""

    def __init__(self):
        self.steps = 0
        self.total_reward = 0.0
        self.on_track_steps = 0
        self.steer_delta_sum = 0.0
        self.prev_steer: float | None = None

    def record(self, steer: float, reward: float, on_track: bool) -> None:
        self.steps += 1
        self.total_reward += reward
        self.on_track_steps += int(on_track)
        if self.prev_steer is not None:
            self.steer_delta_sum += abs(steer - self.prev_steer)
        self.prev_steer = steer

    def result(self, departed: bool, lap_completed: bool) -> EpisodeResult:
        n = self.steps
        deltas = max(n - 1, 1)
        return EpisodeResult(
            steps=n,
            total_reward=self.total_reward,
            on_track_fraction=self.on_track_steps / n if n else 0.0,
            mean_abs_steer_delta=self.steer_delta_sum / deltas if n > 1 else 0.0,
            departed=departed,
            lap_completed=lap_completed,
        )


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    """R0 + gamma*R1 + gamma^2*R2 + ..."""
    g = 0.0
    for r in reversed(rewards):
        g = r + gamma * g
    return g


def returns_to_go(rewards: Sequence[float], gamma: float = 1.0) -> np.ndarray:
    out = np.zeros(len(rewards))
    g = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


def epsilon_greedy(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Uniform random index with probability epsilon, else the first argmax.

    Always consumes exactly one uniform draw (plus one integer draw when
    exploring) so the stream position does not depend on ``q_values``.
    """
    q = np.asarray(q_values)
    if q.size == 0:
        raise ValueError("empty q_values")
    if rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def linear_schedule(start: float, end: float, duration: int, t: int) -> float:
    if duration <= 0 or t >= duration:
        return end
    return start + (end - start) * t / duration


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)

    @classmethod
    def from_transitions(cls, items: Sequence[Transition]) -> "Batch":
        if not items:
            raise ValueError("empty batch")
        return cls(
            obs=np.array([np.asarray(t.obs, dtype=np.float64) for t in items]),
            action=np.array([t.action for t in items]),
            reward=np.array([t.reward for t in items], dtype=np.float64),
            next_obs=np.array([np.asarray(t.next_obs, dtype=np.float64) for t in items]),
            terminal=np.array([t.terminal for t in items], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling.

    Storage is columnar numpy, allocated on the first push.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.inserted = 0
        self._cols: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def _allocate(self, t: Transition) -> None:
        obs = np.asarray(t.obs, dtype=np.float64)
        action = np.asarray(t.action)
        act_dtype = np.int64 if np.issubdtype(action.dtype, np.integer) else np.float64
        c = self.capacity
        self._cols = {
            "obs": np.zeros((c, *obs.shape)),
            "action": np.zeros((c, *action.shape), dtype=act_dtype),
            "reward": np.zeros(c),
            "next_obs": np.zeros((c, *obs.shape)),
            "terminal": np.zeros(c, dtype=bool),
        }

    def push(self, t: Transition) -> None:
        if self._cols is None:
            self._allocate(t)
        i = self.inserted % self.capacity
        cols = self._cols
        cols["obs"][i] = t.obs
        cols["action"][i] = t.action
        cols["reward"][i] = t.reward
        cols["next_obs"][i] = t.next_obs
        cols["terminal"][i] = t.terminal
        self.inserted += 1

    def _ordered_slots(self) -> np.ndarray:
        n = len(self)
        start = self.inserted - n
        return np.arange(start, self.inserted) % self.capacity

    def get(self, slots: np.ndarray) -> Batch:
        c = self._cols
        return Batch(c["obs"][slots], c["action"][slots], c["reward"][slots], c["next_obs"][slots],
                     c["terminal"][slots])

    def items(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        if self._cols is None:
            return []
        b = self.get(self._ordered_slots())
        return [Transition(b.obs[i], b.action[i].item() if b.action.ndim == 1 else b.action[i],
                           float(b.reward[i]), b.next_obs[i], bool(b.terminal[i])) for i in range(len(b))]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        n = len(self)
        if n == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        if n < batch_size:
            raise ValueError(f"buffer holds {n} transitions, need {batch_size}")
        idx = rng.integers(0, n, size=batch_size)
        return self.get(self._ordered_slots()[idx])

    def latest(self, count: int = 1) -> Batch:
        return self.get(self._ordered_slots()[-count:])

    def state_tensors(self, prefix: str = "replay.") -> dict[str, np.ndarray]:
        """Contents oldest-first plus the insertion counter, for checkpointing."""
        out = {f"{prefix}inserted": np.array(float(self.inserted))}
        if self._cols is None:
            return out
        slots = self._ordered_slots()
        for k, v in self._cols.items():
            out[f"{prefix}{k}"] = v[slots].astype(np.float64)
        out[f"{prefix}action_is_int"] = np.array(float(self._cols["action"].dtype == np.int64))
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], prefix: str = "replay.") -> None:
        self.inserted = int(tensors[f"{prefix}inserted"])
        self._cols = None
        if f"{prefix}obs" not in tensors:
            return
        n = len(tensors[f"{prefix}obs"])
        slots = np.arange(self.inserted - n, self.inserted) % self.capacity
        self._cols = {}
        for k in ("obs", "action", "reward", "next_obs", "terminal"):
            src = tensors[f"{prefix}{k}"]
            if k == "terminal":
                dtype = bool
            elif k == "action" and tensors[f"{prefix}action_is_int"] == 1.0:
                dtype = np.int64
            else:
                dtype = np.float64
            col = np.zeros((self.capacity, *src.shape[1:]), dtype=dtype)
            col[slots] = src.astype(dtype)
            self._cols[k] = col


def result_row(episode: int, result: EpisodeResult, epsilon: float, loss_mean: float) -> dict:
    row = {"episode": episode}
    for f in fields(result):
        row[f.name] = getattr(result, f.name)
    row["epsilon"] = epsilon
    row["loss_mean"] = loss_mean
    return row

"""Hard attention over the rangefinder array.

A glimpse policy picks a contiguous window of ``k`` out of ``K`` rays each
step; only that window (plus track_pos and speed) reaches the Q-network. The
policy is trained with REINFORCE on the driving reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .agents.common import Transition, returns_to_go
from .agents.dqn import DqnAgent, DqnConfig
from .nn_engine import Mlp, MlpSpec, NonFiniteError, sgd_step
from .sim_core import SPEED_NORM, Observation


@dataclass(frozen=True)
class GlimpseConfig:
    K: int = 9
    k: int = 3

    def __post_init__(self):
        if not 1 <= self.k <= self.K:
            raise ValueError(f"window width {self.k} must be within [1, {self.K}]")

    @property
    def n_positions(self) -> int:
        return self.K - self.k + 1


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class GlimpsePolicy:
    """Categorical distribution over window positions given a context vector."""

    CONTEXT_SIZE = 2

    def __init__(self, net: Mlp):
        self.net = net

    @classmethod
    def create(cls, cfg: GlimpseConfig, rng: np.random.Generator, hidden: Sequence[int] = (16,)) -> "GlimpsePolicy":
        spec = MlpSpec((cls.CONTEXT_SIZE, *hidden, cfg.n_positions))
        return cls(Mlp.create(spec, rng, prefix="glimpse."))

    @property
    def params(self):
        return self.net.params

    @property
    def n_positions(self) -> int:
        return self.net.spec.n_out

    def probs(self, context: np.ndarray) -> np.ndarray:
        return softmax(self.net(context))


def glimpse_select(policy: GlimpsePolicy, context: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    """Sample a window position; returns (position, log-probability)."""
    context = np.asarray(context, dtype=np.float64)
    if context.shape != (policy.net.spec.n_in,):
        raise ValueError(f"context must have {policy.net.spec.n_in} entries")
    logits = policy.net(context)
    z = logits - logits.max()
    log_p = z - math.log(np.exp(z).sum())
    p = np.exp(log_p)
    u = rng.random()
    pos = int(np.searchsorted(np.cumsum(p), u, side="right"))
    pos = min(pos, p.size - 1)
    return pos, float(log_p[pos])


def entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@dataclass
class RunningBaseline:
    decay: float = 0.99
    value: float = 0.0

    def update(self, x: float) -> None:
        self.value = self.decay * self.value + (1.0 - self.decay) * x


def reinforce_surrogate_and_grads(policy: GlimpsePolicy, contexts: np.ndarray, positions: np.ndarray,
                                  returns: np.ndarray, baseline: float) -> float:
    """Accumulate the gradient of -sum_t log pi(g_t | c_t) * (G_t - b); returns the surrogate."""
    adv = np.asarray(returns, dtype=np.float64) - baseline
    if not np.all(np.isfinite(adv)):
        raise NonFiniteError("non-finite advantage")
    contexts = np.atleast_2d(contexts)
    positions = np.asarray(positions, dtype=np.int64)
    logits, cache = policy.net.forward(contexts)
    p = softmax(logits)
    rows = np.arange(len(positions))
    log_p = np.log(p[rows, positions])
    onehot = np.zeros_like(p)
    onehot[rows, positions] = 1.0
    policy.net.backward(cache, -adv[:, None] * (onehot - p))
    return float(-(log_p * adv).sum())


def reinforce_update(policy: GlimpsePolicy, episode: Sequence[tuple[np.ndarray, int, float]],
                     baseline: RunningBaseline, lr: float) -> GlimpsePolicy:
    """One REINFORCE step over an episode of (context, position, return-to-go)."""
    if not episode:
        return policy
    contexts = np.array([c for c, _, _ in episode])
    positions = np.array([g for _, g, _ in episode])
    returns = np.array([r for _, _, r in episode], dtype=np.float64)
    if not np.all(np.isfinite(returns)):
        raise NonFiniteError("non-finite return")
    policy.params.zero_grad()
    reinforce_surrogate_and_grads(policy, contexts, positions, returns, baseline.value)
    sgd_step(policy.params, lr)
    baseline.update(float(returns.mean()))
    return policy


def attend_observe(obs: Observation, position: int, cfg: GlimpseConfig) -> np.ndarray:
    """``[ranges[position:position+k], track_pos, speed_x / 20]``."""
    if obs.ranges is None or len(obs.ranges) != cfg.K:
        raise ValueError(f"observation needs {cfg.K} rangefinder readings")
    if not 0 <= position < cfg.n_positions:
        raise IndexError(f"window position {position} outside [0, {cfg.n_positions})")
    window = obs.ranges[position:position + cfg.k]
    return np.array([*window, obs.track_pos, obs.speed_x / SPEED_NORM], dtype=np.float64)


def sensor_multiplies(cfg: GlimpseConfig, first_hidden: int) -> int:
    """First-layer multiplies spent on ray inputs per step."""
    return cfg.k * first_hidden


@dataclass(frozen=True)
class GlimpseTrainConfig:
    window: int = 3
    hidden: tuple[int, ...] = (16,)
    lr: float = 0.001
    gamma: float = 0.95
    baseline_decay: float = 0.99


class GlimpseDqnAgent:
    """DQN whose ray inputs pass through a learned hard-attention window."""

    kind = "glimpse-dqn"

    def __init__(self, n_rays: int, n_actions: int, dqn_cfg: DqnConfig, cfg: GlimpseTrainConfig,
                 total_steps: int, init_rng: np.random.Generator, explore_rng: np.random.Generator,
                 replay_rng: np.random.Generator, glimpse_rng: np.random.Generator):
        self.glimpse_cfg = GlimpseConfig(n_rays, cfg.window)
        self.cfg = cfg
        self.dqn = DqnAgent(self.glimpse_cfg.k + 2, n_actions, dqn_cfg, total_steps, init_rng, explore_rng,
                            replay_rng)
        # the glimpse stream also seeds the policy weights so the DQN init stream is untouched
        self.policy = GlimpsePolicy.create(self.glimpse_cfg, glimpse_rng, cfg.hidden)
        self.glimpse_rng = glimpse_rng
        self.baseline = RunningBaseline(cfg.baseline_decay)
        self._reset_episode_log()

    def _reset_episode_log(self) -> None:
        self.prev_window_mean = 0.0
        self.contexts: list[np.ndarray] = []
        self.positions: list[int] = []
        self.rewards: list[float] = []
        self.entropies: list[float] = []

    @property
    def epsilon(self) -> float:
        return self.dqn.epsilon

    @property
    def steps(self) -> int:
        return self.dqn.steps

    def begin_episode(self) -> None:
        self._reset_episode_log()

    def reset_hidden(self) -> None:
        self.prev_window_mean = 0.0

    def featurize(self, obs: Observation, record: bool = True, greedy: bool = False) -> np.ndarray:
        context = np.array([self.prev_window_mean, obs.speed_x / SPEED_NORM])
        if greedy:
            pos = int(np.argmax(self.policy.probs(context)))
        else:
            pos, _ = glimpse_select(self.policy, context, self.glimpse_rng)
        x = attend_observe(obs, pos, self.glimpse_cfg)
        self.prev_window_mean = float(np.mean(x[:self.glimpse_cfg.k]))
        if record:
            self.contexts.append(context)
            self.positions.append(pos)
            self.entropies.append(entropy(self.policy.probs(context)))
        return x

    def act(self, x: np.ndarray, explore: bool = True) -> int:
        return self.dqn.act(x, explore)

    def learn(self, t: Transition) -> float | None:
        self.rewards.append(t.reward)
        return self.dqn.learn(t)

    def end_episode(self) -> None:
        # the featurize call for the final next_obs has no action or reward attached
        n = len(self.rewards)
        if n:
            g = returns_to_go(self.rewards, self.cfg.gamma)
            episode = list(zip(self.contexts[:n], self.positions[:n], g))
            reinforce_update(self.policy, episode, self.baseline, self.cfg.lr)

    def extra_metrics(self) -> dict:
        n = len(self.rewards)
        ent = float(np.mean(self.entropies[:n])) if n else 0.0
        return {
            "glimpse_position_entropy": ent,
            "sensor_multiplies_per_step": sensor_multiplies(self.glimpse_cfg, self.dqn.q.spec.layer_sizes[1]),
        }

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = self.dqn.state_tensors()
        out.update(self.policy.params.values)
        out["glimpse.baseline"] = np.array(self.baseline.value)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.dqn.load_state_tensors(tensors)
        for name in self.policy.params:
            self.policy.params.values[name][...] = tensors[name]
        self.baseline.value = float(tensors["glimpse.baseline"])


def run_position_bandit(policy: GlimpsePolicy, payoffs: Sequence[float], episodes: int, lr: float,
                        rng: np.random.Generator, baseline: RunningBaseline | None = None,
                        context: np.ndarray | None = None) -> GlimpsePolicy:
    """One-step episodes: pick a position, receive ``payoffs[position]``."""
    payoffs = np.asarray(payoffs, dtype=np.float64)
    if payoffs.shape != (policy.n_positions,):
        raise ValueError("need one payoff per position")
    baseline = baseline if baseline is not None else RunningBaseline()
    context = np.zeros(policy.net.spec.n_in) if context is None else np.asarray(context, dtype=np.float64)
    for _ in range(episodes):
        pos, _ = glimpse_select(policy, context, rng)
        reinforce_update(policy, [(context, pos, float(payoffs[pos]))], baseline, lr)
    return policy

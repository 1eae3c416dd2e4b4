from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn_engine import Mlp, MlpSpec, NonFiniteError, clip_grad_norm, sgd_step
from .common import Batch, ReplayBuffer, Transition, epsilon_greedy, linear_schedule


def dqn_loss_and_grads(q_net: Mlp, batch: Batch, gamma: float, use_target_net: bool = False,
                       target_net: Mlp | None = None) -> float:
    """Mean squared TD error; gradients flow only through Q(s, a).

    The bootstrap value max_a' Q(s', a') comes from ``target_net`` when
    ``use_target_net`` is set, otherwise from ``q_net`` itself, and is treated
    as a constant either way.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    q, cache = q_net.forward(batch.obs)
    if q.shape[1] <= int(np.max(batch.action)):
        raise ValueError("action index exceeds Q-network output size")
    boot_net = target_net if use_target_net else q_net
    if boot_net is None:
        raise ValueError("use_target_net needs target_net")
    next_q = boot_net(batch.next_obs)
    target = batch.reward + gamma * np.where(batch.terminal, 0.0, next_q.max(axis=1))
    rows = np.arange(n)
    actions = batch.action.astype(np.int64)
    resid = q[rows, actions] - target
    loss = float(np.mean(resid ** 2))
    if not np.isfinite(loss):
        raise NonFiniteError("DQN loss is non-finite")
    grad = np.zeros_like(q)
    grad[rows, actions] = 2.0 * resid / n
    q_net.backward(cache, grad)
    return loss


@dataclass(frozen=True)
class DqnConfig:
    hidden: tuple[int, ...] = (64, 64)
    gamma: float = 0.95
    lr: float = 0.01
    batch_size: int = 32
    replay: bool = True
    replay_capacity: int = 50_000
    learn_start: int = 500
    target_net: bool = False
    target_sync: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5
    grad_clip: float = 10.0


class DqnAgent:
    """Q-network over tiled actions, trained online or from replay."""

    kind = "dqn"

    def __init__(self, n_inputs: int, n_actions: int, cfg: DqnConfig, total_steps: int,
                 init_rng: np.random.Generator, explore_rng: np.random.Generator,
                 replay_rng: np.random.Generator):
        spec = MlpSpec((n_inputs, *cfg.hidden, n_actions))
        spec.require_hidden()
        self.cfg = cfg
        self.q = Mlp.create(spec, init_rng, prefix="q.")
        self.target = Mlp(spec, self.q.params.copy(), prefix="q.") if cfg.target_net else None
        self.buffer = ReplayBuffer(cfg.replay_capacity if cfg.replay else 1)
        self.explore_rng = explore_rng
        self.replay_rng = replay_rng
        self.total_steps = total_steps
        self.steps = 0

    @property
    def epsilon(self) -> float:
        duration = int(self.cfg.eps_fraction * self.total_steps)
        return linear_schedule(self.cfg.eps_start, self.cfg.eps_end, duration, self.steps)

    def q_values(self, x: np.ndarray) -> np.ndarray:
        return self.q(x)

    def act(self, x: np.ndarray, explore: bool = True) -> int:
        q = self.q(x)
        if not explore:
            return int(np.argmax(q))
        return epsilon_greedy(q, self.epsilon, self.explore_rng)

    def begin_episode(self) -> None:
        pass

    def learn(self, t: Transition) -> float | None:
        """Store ``t`` and take one gradient step; returns the loss if a step was taken."""
        cfg = self.cfg
        self.buffer.push(t)
        self.steps += 1
        if cfg.replay:
            if len(self.buffer) < max(cfg.learn_start, cfg.batch_size):
                return None
            batch = self.buffer.sample(cfg.batch_size, self.replay_rng)
        else:
            batch = self.buffer.latest(1)
        loss = dqn_loss_and_grads(self.q, batch, cfg.gamma, cfg.target_net, self.target)
        if cfg.grad_clip > 0:
            clip_grad_norm(self.q.params, cfg.grad_clip)
        sgd_step(self.q.params, cfg.lr)
        if self.target is not None and self.steps % cfg.target_sync == 0:
            self.target.params.load_values(self.q.params)
        return loss

    # -- persistence
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.q.params.values)
        if self.target is not None:
            out.update({f"target.{k}": v for k, v in self.target.params.values.items()})
        out.update(self.buffer.state_tensors())
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name in self.q.params:
            self.q.params.values[name][...] = tensors[name]
        if self.target is not None:
            for name in self.target.params:
                self.target.params.values[name][...] = tensors[f"target.{name}"]
        self.buffer.load_state_tensors(tensors)

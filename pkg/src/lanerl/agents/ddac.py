"""Deterministic actor-critic for the continuous (steer, throttle) actions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn_engine import Mlp, MlpSpec, NonFiniteError, clip_grad_norm, sgd_step
from ..sim_core import ContinuousAction
from .common import Batch, ReplayBuffer, Transition, linear_schedule


class Actor:
    """Maps features to pre-squash outputs; ``squash`` applies tanh to each output."""

    def __init__(self, net: Mlp, squash: bool = True):
        self.net = net
        self.squash = squash

    @property
    def params(self):
        return self.net.params

    def pre_action(self, x):
        return self.net(x)

    def __call__(self, x):
        u = self.net(x)
        return np.tanh(u) if self.squash else u

    def backward_from_action_grad(self, x, grad_action) -> None:
        """Accumulate dL/du given dL/da for the batch ``x``."""
        u, cache = self.net.forward(x)
        g = grad_action * (1.0 - np.tanh(u) ** 2) if self.squash else grad_action
        self.net.backward(cache, g)


class MlpCritic:
    """Q(s, a) as an MLP over the concatenation [s, a]."""

    def __init__(self, net: Mlp, action_dim: int):
        self.net = net
        self.action_dim = action_dim

    @property
    def params(self):
        return self.net.params

    def value(self, x, a) -> np.ndarray:
        return self.net(np.concatenate([np.atleast_2d(x), np.atleast_2d(a)], axis=1))[:, 0]

    def action_gradient(self, x, a) -> np.ndarray:
        """dQ/da per row, leaving the critic's parameter gradients untouched."""
        inp = np.concatenate([np.atleast_2d(x), np.atleast_2d(a)], axis=1)
        _, cache = self.net.forward(inp)
        g_in = self.net.backward(cache, np.ones((inp.shape[0], 1)), accumulate=False)
        return g_in[:, -self.action_dim:]

    def td_loss_and_grads(self, batch: Batch, next_actions: np.ndarray, gamma: float,
                          target: "MlpCritic | None" = None) -> float:
        boot = target if target is not None else self
        next_q = boot.value(batch.next_obs, next_actions)
        y = batch.reward + gamma * np.where(batch.terminal, 0.0, next_q)
        inp = np.concatenate([batch.obs, batch.action], axis=1)
        q, cache = self.net.forward(inp)
        resid = q[:, 0] - y
        loss = float(np.mean(resid ** 2))
        if not np.isfinite(loss):
            raise NonFiniteError("critic loss is non-finite")
        self.net.backward(cache, (2.0 * resid / len(resid))[:, None])
        return loss


def actor_gradient(actor: Actor, critic, x: np.ndarray) -> float:
    """Accumulate -dJ/du into the actor's gradients, J = mean Q(s, pi(s, u)).

    Chain rule: dJ/du = dQ/da at a = pi(s, u), times dpi/du. ``critic`` only
    needs an ``action_gradient(x, a)`` method. Returns J.
    """
    x = np.atleast_2d(x)
    a = np.atleast_2d(actor(x))
    dq_da = np.atleast_2d(critic.action_gradient(x, a))
    if not np.all(np.isfinite(dq_da)):
        raise NonFiniteError("critic action-gradient is non-finite")
    actor.backward_from_action_grad(x, -dq_da / x.shape[0])
    return float(np.mean(critic.value(x, a)))


def ddac_update(actor: Actor, critic: MlpCritic, batch: Batch, gamma: float, lr_actor: float,
                lr_critic: float, target_actor: Actor | None = None, target_critic: MlpCritic | None = None,
                grad_clip: float = 0.0) -> tuple[float, float]:
    """One critic TD step (bootstrap action pi(s')) then one actor chain-rule step."""
    next_actions = (target_actor or actor)(batch.next_obs)
    loss = critic.td_loss_and_grads(batch, np.atleast_2d(next_actions), gamma, target_critic)
    if grad_clip > 0:
        clip_grad_norm(critic.params, grad_clip)
    sgd_step(critic.params, lr_critic)
    objective = actor_gradient(actor, critic, batch.obs)
    if grad_clip > 0:
        clip_grad_norm(actor.params, grad_clip)
    sgd_step(actor.params, lr_actor)
    return loss, objective


@dataclass(frozen=True)
class DdacConfig:
    hidden: tuple[int, ...] = (64, 64)
    gamma: float = 0.95
    lr_actor: float = 0.003
    lr_critic: float = 0.003
    batch_size: int = 32
    replay: bool = True
    replay_capacity: int = 50_000
    learn_start: int = 500
    target_net: bool = False
    target_sync: int = 500
    sigma_start: float = 0.3
    sigma_end: float = 0.02
    sigma_fraction: float = 0.5
    grad_clip: float = 10.0


class DdacAgent:
    kind = "ddac"
    action_dim = 2

    def __init__(self, n_inputs: int, cfg: DdacConfig, total_steps: int, init_rng: np.random.Generator,
                 explore_rng: np.random.Generator, replay_rng: np.random.Generator):
        self.cfg = cfg
        actor_spec = MlpSpec((n_inputs, *cfg.hidden, self.action_dim))
        critic_spec = MlpSpec((n_inputs + self.action_dim, *cfg.hidden, 1))
        actor_spec.require_hidden()
        critic_spec.require_hidden()
        self.actor = Actor(Mlp.create(actor_spec, init_rng, prefix="actor."))
        self.critic = MlpCritic(Mlp.create(critic_spec, init_rng, prefix="critic."), self.action_dim)
        if cfg.target_net:
            self.target_actor = Actor(Mlp(actor_spec, self.actor.params.copy(), prefix="actor."))
            self.target_critic = MlpCritic(Mlp(critic_spec, self.critic.params.copy(), prefix="critic."),
                                           self.action_dim)
        else:
            self.target_actor = self.target_critic = None
        self.buffer = ReplayBuffer(cfg.replay_capacity if cfg.replay else 1)
        self.explore_rng = explore_rng
        self.replay_rng = replay_rng
        self.total_steps = total_steps
        self.steps = 0

    @property
    def epsilon(self) -> float:
        """Current exploration noise scale (reported in the epsilon column)."""
        duration = int(self.cfg.sigma_fraction * self.total_steps)
        return linear_schedule(self.cfg.sigma_start, self.cfg.sigma_end, duration, self.steps)

    def begin_episode(self) -> None:
        pass

    def act(self, x: np.ndarray, explore: bool = True) -> np.ndarray:
        """Squashed (steer, throttle) pair."""
        u = self.actor.pre_action(x)
        if explore:
            u = u + self.epsilon * self.explore_rng.standard_normal(u.shape)
        return np.tanh(u)

    @staticmethod
    def to_env_action(a: np.ndarray) -> ContinuousAction:
        return ContinuousAction.from_throttle(float(a[0]), float(a[1]))

    def learn(self, t: Transition) -> float | None:
        cfg = self.cfg
        self.buffer.push(t)
        self.steps += 1
        if cfg.replay:
            if len(self.buffer) < max(cfg.learn_start, cfg.batch_size):
                return None
            batch = self.buffer.sample(cfg.batch_size, self.replay_rng)
        else:
            batch = self.buffer.latest(1)
        loss, _ = ddac_update(self.actor, self.critic, batch, cfg.gamma, cfg.lr_actor, cfg.lr_critic,
                              self.target_actor, self.target_critic, cfg.grad_clip)
        if self.target_actor is not None and self.steps % cfg.target_sync == 0:
            self.target_actor.params.load_values(self.actor.params)
            self.target_critic.params.load_values(self.critic.params)
        return loss

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {**self.actor.params.values, **self.critic.params.values}
        if self.target_actor is not None:
            out.update({f"target.{k}": v for k, v in self.target_actor.params.values.items()})
            out.update({f"target.{k}": v for k, v in self.target_critic.params.values.items()})
        out.update(self.buffer.state_tensors())
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for ps in (self.actor.params, self.critic.params):
            for name in ps:
                ps.values[name][...] = tensors[name]
        if self.target_actor is not None:
            for ps in (self.target_actor.params, self.target_critic.params):
                for name in ps:
                    ps.values[name][...] = tensors[f"target.{name}"]
        self.buffer.load_state_tensors(tensors)

"""Recurrent Q-learning: an LSTM encoder under a Q head, trained on contiguous fragments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..nn_engine import (LstmState, Mlp, MlpSpec, NonFiniteError, ParamSet, clip_grad_norm, lstm_init,
                         lstm_gate_grads, lstm_step, mlp_init, sgd_step)
from .common import Transition, epsilon_greedy, linear_schedule


class OrderError(ValueError):
    pass


class RecurrentQNet:
    """LSTM(n_in -> hidden) followed by an MLP head to one Q-value per action.

    ``bypass=True`` feeds observations straight to the head, which turns the
    network into a plain feedforward Q-network (used for reduction tests).
    """

    def __init__(self, n_in: int, n_actions: int, hidden: int, head_hidden: Sequence[int],
                 rng: np.random.Generator, bypass: bool = False):
        self.n_in = n_in
        self.hidden = hidden
        self.bypass = bypass
        self.params = ParamSet() if bypass else lstm_init(n_in, hidden, rng)
        head_in = n_in if bypass else hidden
        self.head_spec = MlpSpec((head_in, *head_hidden, n_actions))
        self.params.update(mlp_init(self.head_spec, rng, prefix="head."))
        self.head = Mlp(self.head_spec, self.params, prefix="head.")

    @property
    def n_actions(self) -> int:
        return self.head_spec.n_out

    def initial_state(self, batch: int | None = None) -> LstmState:
        return LstmState.zeros(self.hidden, batch)

    def step(self, x: np.ndarray, state: LstmState) -> tuple[np.ndarray, LstmState]:
        """Single-step inference: (Q-values, next state)."""
        if self.bypass:
            return self.head(x), state
        state = lstm_step(self.params, x, state)
        return self.head(state.h), state

    def unroll(self, xs: np.ndarray, state: LstmState | None = None):
        """Forward over ``xs`` of shape (B, T, n_in). Returns (Q of shape (B, T, A), caches)."""
        B, T, _ = xs.shape
        if self.bypass:
            q, cache = self.head.forward(xs.reshape(B * T, -1))
            return q.reshape(B, T, -1), ("bypass", cache)
        state = state if state is not None else self.initial_state(B)
        hs, caches = [], []
        for t in range(T):
            state, c = lstm_step(self.params, xs[:, t], state, return_cache=True)
            hs.append(state.h)
            caches.append(c)
        H = np.stack(hs, axis=1)
        q, head_cache = self.head.forward(H.reshape(B * T, -1))
        return q.reshape(B, T, -1), ("lstm", (caches, head_cache))

    def backward(self, caches, dq: np.ndarray, bptt_len: int) -> None:
        """Accumulate gradients for dL/dQ ``dq`` (B, T, A).

        Backpropagation through time is cut every ``bptt_len`` steps: state is
        carried forward across a cut but no gradient flows back over it.
        """
        B, T, A = dq.shape
        kind, payload = caches
        if kind == "bypass":
            self.head.backward(payload, dq.reshape(B * T, A))
            return
        lstm_caches, head_cache = payload
        dH = self.head.backward(head_cache, dq.reshape(B * T, A)).reshape(B, T, -1)
        dh = np.zeros((B, self.hidden))
        dc = np.zeros((B, self.hidden))
        Wh = self.params["lstm.Wh"]
        dzs = [None] * T
        for t in range(T - 1, -1, -1):
            if (t + 1) % bptt_len == 0:
                dh[...] = 0.0
                dc[...] = 0.0
            dzs[t], dc = lstm_gate_grads(lstm_caches[t], dh + dH[:, t], dc)
            dh = dzs[t] @ Wh.T
        # weight gradients in one product over all steps
        dz = np.concatenate(dzs)
        self.params.grads["lstm.Wx"] += np.concatenate([c.x for c in lstm_caches]).T @ dz
        self.params.grads["lstm.Wh"] += np.concatenate([c.h_prev for c in lstm_caches]).T @ dz
        self.params.grads["lstm.b"] += dz.sum(axis=0)


@dataclass
class FragmentBatch:
    """B padded fragments: obs has T+1 steps (the last is the final next_obs)."""

    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    terminal: np.ndarray
    mask: np.ndarray


def fragment_from_transitions(seq: Sequence[Transition]) -> FragmentBatch:
    if not seq:
        raise ValueError("empty fragment")
    steps = [t.step for t in seq]
    if all(s is not None for s in steps):
        if any(b != a + 1 for a, b in zip(steps, steps[1:])):
            raise OrderError(f"fragment is not time-ordered: steps {steps[:8]}...")
    obs = np.array([np.asarray(t.obs, float) for t in seq] + [np.asarray(seq[-1].next_obs, float)])
    return FragmentBatch(
        obs=obs[None],
        action=np.array([[int(t.action) for t in seq]]),
        reward=np.array([[t.reward for t in seq]], dtype=float),
        terminal=np.array([[t.terminal for t in seq]], dtype=bool),
        mask=np.ones((1, len(seq))),
    )


def drqn_loss_and_grads(net: RecurrentQNet, frag: FragmentBatch, gamma: float, bptt_len: int) -> float:
    """Masked mean squared TD error over fragments; targets use the same unroll, detached."""
    if bptt_len < 1:
        raise ValueError("bptt_len must be >= 1")
    q_all, caches = net.unroll(frag.obs)
    B, T = frag.action.shape
    q = q_all[:, :T]
    boot = q_all[:, 1:].max(axis=2)
    target = frag.reward + gamma * np.where(frag.terminal, 0.0, boot)
    bi, ti = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
    pred = q[bi, ti, frag.action]
    resid = (pred - target) * frag.mask
    count = frag.mask.sum()
    loss = float(np.sum(resid ** 2) / count)
    if not np.isfinite(loss):
        raise NonFiniteError("DRQN loss is non-finite")
    dq = np.zeros_like(q_all)
    dq[bi, ti, frag.action] = 2.0 * resid / count
    net.backward(caches, dq, bptt_len)
    return loss


def drqn_train(sequence: Sequence[Transition], net: RecurrentQNet, gamma: float, bptt_len: int) -> float:
    """Loss and accumulated gradients for one time-ordered fragment, hidden state zeroed at its start."""
    return drqn_loss_and_grads(net, fragment_from_transitions(sequence), gamma, bptt_len)


class EpisodeReplay:
    """Transitions grouped by episode; evicts whole episodes oldest-first beyond ``capacity``."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.episodes: list[dict[str, list]] = []
        self.size = 0

    def start_episode(self) -> None:
        self.episodes.append({"obs": [], "action": [], "reward": [], "terminal": [], "next_obs": []})

    def push(self, x, action, reward, next_x, terminal) -> None:
        if not self.episodes:
            self.start_episode()
        ep = self.episodes[-1]
        ep["obs"].append(np.asarray(x, float))
        ep["action"].append(int(action))
        ep["reward"].append(float(reward))
        ep["terminal"].append(bool(terminal))
        ep["next_obs"].append(np.asarray(next_x, float))
        self.size += 1
        while self.size > self.capacity and len(self.episodes) > 1:
            self.size -= len(self.episodes.pop(0)["obs"])

    def __len__(self) -> int:
        return self.size

    def _fragment(self, ep: dict, start: int, length: int, T: int) -> tuple:
        end = min(start + length, len(ep["obs"]))
        n = end - start
        obs = np.zeros((T + 1, len(ep["obs"][0])))
        obs[:n] = ep["obs"][start:end]
        obs[n] = ep["next_obs"][end - 1]
        act = np.zeros(T, dtype=np.int64)
        act[:n] = ep["action"][start:end]
        rew = np.zeros(T)
        rew[:n] = ep["reward"][start:end]
        term = np.zeros(T, dtype=bool)
        term[:n] = ep["terminal"][start:end]
        mask = np.zeros(T)
        mask[:n] = 1.0
        return obs, act, rew, term, mask

    def sample(self, n_fragments: int, length: int, rng: np.random.Generator) -> FragmentBatch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        lengths = np.array([len(ep["obs"]) for ep in self.episodes])
        bounds = np.cumsum(lengths)
        picks = rng.integers(0, self.size, size=n_fragments)
        parts = []
        for p in picks:
            e = int(np.searchsorted(bounds, p, side="right"))
            local = int(p - (bounds[e] - lengths[e]))
            start = max(0, min(local, lengths[e] - length))
            parts.append(self._fragment(self.episodes[e], start, length, length))
        return FragmentBatch(*(np.stack(col) for col in zip(*parts)))

    def latest(self, length: int) -> FragmentBatch:
        ep = self.episodes[-1]
        start = max(0, len(ep["obs"]) - length)
        n = len(ep["obs"]) - start
        return FragmentBatch(*(np.stack([col]) for col in self._fragment(ep, start, n, n)))

    def state_tensors(self, prefix: str = "ereplay.") -> dict[str, np.ndarray]:
        out = {f"{prefix}lengths": np.array([len(ep["obs"]) for ep in self.episodes], float)}
        if self.size:
            for k in ("obs", "action", "reward", "terminal", "next_obs"):
                out[f"{prefix}{k}"] = np.array([v for ep in self.episodes for v in ep[k]], float)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], prefix: str = "ereplay.") -> None:
        self.episodes, self.size = [], 0
        offset = 0
        for n in tensors[f"{prefix}lengths"].astype(int):
            ep = {
                "obs": list(tensors[f"{prefix}obs"][offset:offset + n]),
                "action": [int(a) for a in tensors[f"{prefix}action"][offset:offset + n]],
                "reward": [float(r) for r in tensors[f"{prefix}reward"][offset:offset + n]],
                "terminal": [bool(t) for t in tensors[f"{prefix}terminal"][offset:offset + n]],
                "next_obs": list(tensors[f"{prefix}next_obs"][offset:offset + n]),
            }
            self.episodes.append(ep)
            self.size += n
            offset += n


@dataclass(frozen=True)
class DrqnConfig:
    lstm_hidden: int = 32
    head_hidden: tuple[int, ...] = (64,)
    gamma: float = 0.95
    lr: float = 0.01
    fragment_len: int = 16
    bptt_len: int = 16
    fragments_per_batch: int = 4
    replay: bool = True
    replay_capacity: int = 50_000
    learn_start: int = 500
    train_every: int = 1
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5
    grad_clip: float = 10.0


class DrqnAgent:
    kind = "drqn"

    def __init__(self, n_inputs: int, n_actions: int, cfg: DrqnConfig, total_steps: int,
                 init_rng: np.random.Generator, explore_rng: np.random.Generator,
                 replay_rng: np.random.Generator):
        self.cfg = cfg
        self.net = RecurrentQNet(n_inputs, n_actions, cfg.lstm_hidden, cfg.head_hidden, init_rng)
        self.replay = EpisodeReplay(cfg.replay_capacity if cfg.replay else cfg.fragment_len)
        self.explore_rng = explore_rng
        self.replay_rng = replay_rng
        self.total_steps = total_steps
        self.steps = 0
        self.state = self.net.initial_state()

    @property
    def epsilon(self) -> float:
        duration = int(self.cfg.eps_fraction * self.total_steps)
        return linear_schedule(self.cfg.eps_start, self.cfg.eps_end, duration, self.steps)

    def reset_hidden(self) -> None:
        self.state = self.net.initial_state()

    def begin_episode(self) -> None:
        self.reset_hidden()
        self.replay.start_episode()

    def act(self, x: np.ndarray, explore: bool = True) -> int:
        q, self.state = self.net.step(x, self.state)
        if not explore:
            return int(np.argmax(q))
        return epsilon_greedy(q, self.epsilon, self.explore_rng)

    def learn(self, t: Transition) -> float | None:
        cfg = self.cfg
        self.replay.push(t.obs, t.action, t.reward, t.next_obs, t.terminal)
        self.steps += 1
        if cfg.replay:
            if len(self.replay) < cfg.learn_start or self.steps % cfg.train_every:
                return None
            frag = self.replay.sample(cfg.fragments_per_batch, cfg.fragment_len, self.replay_rng)
        else:
            frag = self.replay.latest(cfg.fragment_len)
        loss = drqn_loss_and_grads(self.net, frag, cfg.gamma, cfg.bptt_len)
        if cfg.grad_clip > 0:
            clip_grad_norm(self.net.params, cfg.grad_clip)
        sgd_step(self.net.params, cfg.lr)
        return loss

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.net.params.values)
        out.update(self.replay.state_tensors())
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name in self.net.params:
            self.net.params.values[name][...] = tensors[name]
        self.replay.load_state_tensors(tensors)

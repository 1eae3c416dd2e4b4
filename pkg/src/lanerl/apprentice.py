"""Learning to drive from a proportional lane-keeping controller.

Control is handed over gradually: ``epsilon`` is the probability that the
learned model, rather than the expert, drives a given step. The expert still
labels every visited state, so the dataset covers the states the model
itself reaches.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .agents.common import EpisodeTracker, linear_schedule
from .nn_engine import Mlp, MlpSpec, NonFiniteError, sgd_step
from .sim_core import CarState, ContinuousAction, DrivingEnv, Observation, features, observe


@dataclass(frozen=True)
class ExpertConfig:
    k_steer: float = 1.2
    k_psi: float = 1.0
    v_target: float = 12.0
    k_speed: float = 1.0

    def __post_init__(self):
        if not (self.k_steer > 0 and self.k_psi >= 0 and self.v_target > 0 and self.k_speed > 0):
            raise ValueError("expert gains out of range")


def p_controller(obs: Observation, cfg: ExpertConfig, psi: float = 0.0) -> ContinuousAction:
    """Steer toward the centerline and hold ``v_target``.

    ``psi`` is the true heading error; the expert is allowed to read state the
    learner does not see.
    """
    steer = -cfg.k_steer * obs.track_pos - cfg.k_psi * psi
    throttle = cfg.k_speed * (cfg.v_target - obs.speed_x)
    return ContinuousAction.from_throttle(steer, throttle)


def expert_action(state: CarState, obs_true: Observation, cfg: ExpertConfig) -> ContinuousAction:
    return p_controller(obs_true, cfg, state.psi)


def blended_step(model_action: ContinuousAction, expert_action: ContinuousAction, epsilon: float,
                 rng: np.random.Generator) -> tuple[ContinuousAction, str]:
    """Model action with probability ``epsilon``, otherwise the expert's."""
    if rng.random() < epsilon:
        return model_action, "model"
    return expert_action, "expert"


@dataclass
class DemoDataset:
    features: list[np.ndarray] = field(default_factory=list)
    actions: list[tuple[float, float, float]] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)
    episode_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.features)

    def append(self, x: np.ndarray, action: ContinuousAction, source: str, episode: int = 0) -> None:
        x = np.asarray(x, dtype=np.float64)
        row = (action.steer, action.accel, action.brake)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(row))):
            raise NonFiniteError("non-finite demonstration row")
        self.features.append(x)
        self.actions.append(row)
        self.sources.append(source)
        self.episode_ids.append(episode)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) with Y = (steer, throttle) where throttle = accel - brake."""
        X = np.array(self.features)
        A = np.array(self.actions)
        return X, np.stack([A[:, 0], A[:, 1] - A[:, 2]], axis=1)

    def write_csv(self, path: str | Path, source_log: str | Path | None = None) -> None:
        n_feat = len(self.features[0]) if self.features else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"feature_{i}" for i in range(n_feat)] + ["steer", "accel", "brake"])
            for x, a in zip(self.features, self.actions):
                w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in a])
        if source_log is not None:
            with open(source_log, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["row", "episode", "source"])
                for i, (e, s) in enumerate(zip(self.episode_ids, self.sources)):
                    w.writerow([i, e, s])

    @classmethod
    def read_csv(cls, path: str | Path) -> "DemoDataset":
        ds = cls()
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            n_feat = header.index("steer")
            for row in r:
                vals = [float(v) for v in row]
                ds.append(np.array(vals[:n_feat]), ContinuousAction(*vals[n_feat:]), "expert")
        return ds


class RegressionPolicy:
    """MLP from features to pre-clamp (steer, throttle)."""

    def __init__(self, net: Mlp):
        self.net = net

    @classmethod
    def create(cls, n_inputs: int, rng: np.random.Generator, hidden: Sequence[int] = (32, 32)) -> "RegressionPolicy":
        return cls(Mlp.create(MlpSpec((n_inputs, *hidden, 2)), rng, prefix="reg."))

    @property
    def params(self):
        return self.net.params

    def __call__(self, x: np.ndarray) -> ContinuousAction:
        out = self.net(x)
        return ContinuousAction.from_throttle(float(out[0]), float(out[1]))


def regression_loss_and_grads(net: Mlp, X: np.ndarray, Y: np.ndarray) -> float:
    pred, cache = net.forward(X)
    resid = pred - Y
    loss = float(np.mean(np.sum(resid ** 2, axis=1)))
    net.backward(cache, 2.0 * resid / len(X))
    return loss


def fit_regression(data: DemoDataset, policy: RegressionPolicy, epochs: int, lr: float, batch: int,
                   rng: np.random.Generator) -> float:
    """Minibatch SGD on the squared action error; returns the final training MSE."""
    if len(data) == 0:
        raise ValueError("empty demonstration dataset")
    X, Y = data.arrays()
    net = policy.net
    n = len(X)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss = regression_loss_and_grads(net, X[idx], Y[idx])
            if not np.isfinite(loss):
                raise NonFiniteError("regression diverged")
            sgd_step(net.params, lr)
    pred = net(X)
    mse = float(np.mean(np.sum((pred - Y) ** 2, axis=1)))
    if not np.isfinite(mse):
        raise NonFiniteError("regression diverged")
    return mse


def true_observation(env: DrivingEnv) -> Observation:
    """The un-flickered sensor readout of the current state (what the expert sees)."""
    return observe(env.state, env.track, None, dataclasses.replace(env.cfg, flicker=False))


def rollout(env: DrivingEnv, expert: ExpertConfig, policy: RegressionPolicy | None, epsilon: float,
            blend_rng: np.random.Generator, data: DemoDataset | None = None, episode: int = 0,
            trajectory: list | None = None):
    """Drive one episode with blended control; optionally label every step into ``data``."""
    obs = env.reset()
    tracker = EpisodeTracker()
    speeds = []
    while True:
        x = features(obs)
        label = expert_action(env.state, true_observation(env), expert)
        model_action = policy(x) if policy is not None else label
        action, source = blended_step(model_action, label, epsilon, blend_rng)
        if data is not None:
            data.append(x, label, source, episode)
        prev = env.state
        obs, r, done = env.step(action)
        tracker.record(action.clamped().steer, r, not env.departed)
        speeds.append(env.state.v)
        if trajectory is not None:
            trajectory.append((prev, action, r))
        if done:
            break
    return tracker.result(env.departed, env.lap_completed), float(np.mean(speeds)) if speeds else 0.0


def collect_demos(env: DrivingEnv, expert: ExpertConfig, schedule: Sequence[float], policy: RegressionPolicy | None,
                  episodes: int, blend_rng: np.random.Generator) -> DemoDataset:
    if len(schedule) != episodes:
        raise ValueError("schedule needs one epsilon per episode")
    data = DemoDataset()
    for e, eps in enumerate(schedule):
        rollout(env, expert, policy, eps, blend_rng, data, e)
    return data


def linear_handover(episodes: int, start: float = 0.0, end: float = 1.0) -> list[float]:
    """Per-episode model share rising linearly from ``start`` to ``end``."""
    if episodes == 1:
        return [end]
    return [linear_schedule(start, end, episodes - 1, e) for e in range(episodes)]


@dataclass(frozen=True)
class ApprenticeConfig:
    k_steer: float = 1.2
    k_psi: float = 1.0
    v_target: float = 12.0
    k_speed: float = 1.0
    hidden: tuple[int, ...] = (32, 32)
    lr: float = 0.05
    batch: int = 64
    epochs_per_episode: int = 2

    def expert(self) -> ExpertConfig:
        return ExpertConfig(self.k_steer, self.k_psi, self.v_target, self.k_speed)


class ApprenticeAgent:
    """Collect-and-refit loop packaged with the same episode interface as the RL agents."""

    kind = "apprentice"

    def __init__(self, n_inputs: int, cfg: ApprenticeConfig, episodes: int, init_rng: np.random.Generator,
                 blend_rng: np.random.Generator, fit_rng: np.random.Generator):
        self.cfg = cfg
        self.expert = cfg.expert()
        self.policy = RegressionPolicy.create(n_inputs, init_rng, cfg.hidden)
        self.data = DemoDataset()
        self.schedule_len = max(episodes, 1)
        self.blend_rng = blend_rng
        self.fit_rng = fit_rng
        self.episode = 0
        self.last_mse = float("nan")

    @property
    def epsilon(self) -> float:
        return linear_handover(self.schedule_len)[min(self.episode, self.schedule_len - 1)]

    def run_training_episode(self, env: DrivingEnv):
        result, _ = rollout(env, self.expert, self.policy, self.epsilon, self.blend_rng, self.data, self.episode)
        eps = self.epsilon
        self.last_mse = fit_regression(self.data, self.policy, self.cfg.epochs_per_episode, self.cfg.lr,
                                       self.cfg.batch, self.fit_rng)
        self.episode += 1
        return result, eps, self.last_mse

    def evaluate_episode(self, env: DrivingEnv, rng: np.random.Generator):
        """Cloned policy alone (model share 1)."""
        return rollout(env, self.expert, self.policy, 1.0, rng)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.policy.params.values)
        if len(self.data):
            X = np.array(self.data.features)
            out["demo.features"] = X
            out["demo.actions"] = np.array(self.data.actions)
            out["demo.source_is_model"] = np.array([s == "model" for s in self.data.sources], float)
            out["demo.episode"] = np.array(self.data.episode_ids, float)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name in self.policy.params:
            self.policy.params.values[name][...] = tensors[name]
        self.data = DemoDataset()
        if "demo.features" in tensors:
            for x, a, m, e in zip(tensors["demo.features"], tensors["demo.actions"],
                                  tensors["demo.source_is_model"], tensors["demo.episode"]):
                self.data.append(x, ContinuousAction(*a), "model" if m else "expert", int(e))

"""Episode loop shared by every agent kind, with resumable state."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from ..nn_engine import NonFiniteError
from ..sim_core import ActionSpec, ContinuousAction, DrivingEnv, Observation, encode_action, features
from .common import METRIC_COLUMNS, EpisodeResult, EpisodeTracker, Transition, result_row

GLIMPSE_COLUMNS = ("glimpse_position_entropy", "sensor_multiplies_per_step")


class DivergenceError(RuntimeError):
    """Training produced a non-finite value; ``metrics`` holds the completed episodes."""

    def __init__(self, message: str, metrics: list[dict]):
        super().__init__(message)
        self.metrics = metrics


def metric_columns(agent) -> tuple[str, ...]:
    if getattr(agent, "kind", "") == "glimpse-dqn":
        return METRIC_COLUMNS + GLIMPSE_COLUMNS
    return METRIC_COLUMNS


def _featurize(agent, obs: Observation, greedy: bool = False):
    if agent.kind == "glimpse-dqn":
        return agent.featurize(obs, record=not greedy, greedy=greedy)
    if hasattr(agent, "featurize"):
        return agent.featurize(obs)
    return features(obs)


def _env_action(agent, a, spec: ActionSpec) -> ContinuousAction:
    if agent.kind == "ddac":
        return agent.to_env_action(a)
    return encode_action(int(a), spec)


class GreedyDriver:
    """Exploration-free controller over a trained agent; never updates parameters."""

    def __init__(self, agent, action_spec: ActionSpec):
        self.agent = agent
        self.action_spec = action_spec

    def reset(self) -> None:
        if hasattr(self.agent, "reset_hidden"):
            self.agent.reset_hidden()

    def __call__(self, env: DrivingEnv, obs: Observation) -> ContinuousAction:
        if self.agent.kind == "apprentice":
            return self.agent.policy(features(obs))
        x = _featurize(self.agent, obs, greedy=True)
        return _env_action(self.agent, self.agent.act(x, explore=False), self.action_spec)


def drive_episode(driver: Callable, env: DrivingEnv,
                  on_step: Callable | None = None) -> EpisodeResult:
    """Run ``driver`` for one episode; ``on_step(t, prev_state, action, reward)`` sees every step."""
    if hasattr(driver, "reset"):
        driver.reset()
    obs = env.reset()
    tracker = EpisodeTracker()
    t = 0
    while True:
        action = driver(env, obs)
        prev = env.state
        obs, r, done = env.step(action)
        tracker.record(action.clamped().steer, r, not env.departed)
        if on_step is not None:
            on_step(t, prev, action, r)
        t += 1
        if done:
            return tracker.result(env.departed, env.lap_completed)


def evaluate(driver: Callable, env: DrivingEnv, episodes: int) -> list[EpisodeResult]:
    return [drive_episode(driver, env) for _ in range(episodes)]


def _is_terminal_for_learning(env: DrivingEnv) -> bool:
    # running out of time is a truncation, not a terminal state
    return env.departed or env.lap_completed


class Trainer:
    """Runs training episodes until the episode budget or the total-step budget is spent.

    The step budget is checked between episodes, so the final episode always
    runs to its natural end. All randomness comes from ``streams``.
    """

    def __init__(self, env: DrivingEnv, agent, action_spec: ActionSpec, episodes: int,
                 streams: dict[str, np.random.Generator], max_total_steps: int | None = None):
        self.env = env
        self.agent = agent
        self.action_spec = action_spec
        self.episodes = episodes
        self.max_total_steps = max_total_steps
        self.streams = streams
        self.metrics: list[dict] = []
        self.episode = 0
        self.total_steps = 0

    @property
    def finished(self) -> bool:
        if self.episode >= self.episodes:
            return True
        return self.max_total_steps is not None and self.total_steps >= self.max_total_steps

    def run(self, on_episode: Callable[[dict], None] | None = None, stop_after: int | None = None) -> list[dict]:
        """Train to the budget (or for ``stop_after`` more episodes); raises DivergenceError."""
        ran = 0
        while not self.finished and (stop_after is None or ran < stop_after):
            try:
                row = self.run_episode()
            except (NonFiniteError, FloatingPointError) as exc:
                raise DivergenceError(f"diverged in episode {self.episode}: {exc}", list(self.metrics)) from exc
            self.metrics.append(row)
            if on_episode is not None:
                on_episode(row)
            ran += 1
        return self.metrics

    def run_episode(self) -> dict:
        agent = self.agent
        if agent.kind == "apprentice":
            result, eps, mse = agent.run_training_episode(self.env)
            self.total_steps += result.steps
            row = result_row(self.episode, result, eps, mse)
            self.episode += 1
            return row

        env = self.env
        eps = agent.epsilon
        agent.begin_episode()
        obs = env.reset()
        x = _featurize(agent, obs)
        tracker = EpisodeTracker()
        losses = []
        while True:
            a = agent.act(x)
            action = _env_action(agent, a, self.action_spec)
            obs, r, done = env.step(action)
            x2 = _featurize(agent, obs)
            loss = agent.learn(Transition(x, a, r, x2, _is_terminal_for_learning(env), env.state.step_count))
            if loss is not None:
                if not math.isfinite(loss):
                    raise NonFiniteError("non-finite training loss")
                losses.append(loss)
            tracker.record(action.clamped().steer, r, not env.departed)
            x = x2
            if done:
                break
        if hasattr(agent, "end_episode"):
            agent.end_episode()
        result = tracker.result(env.departed, env.lap_completed)
        self.total_steps += result.steps
        row = result_row(self.episode, result, eps, float(np.mean(losses)) if losses else float("nan"))
        if hasattr(agent, "extra_metrics"):
            row.update(agent.extra_metrics())
        self.episode += 1
        return row

    # -- resumable state

    def _agent_counter(self) -> int:
        if self.agent.kind == "apprentice":
            return self.agent.episode
        return self.agent.steps

    def _set_agent_counter(self, n: int) -> None:
        if self.agent.kind == "apprentice":
            self.agent.episode = n
        elif self.agent.kind == "glimpse-dqn":
            self.agent.dqn.steps = n
        else:
            self.agent.steps = n

    def snapshot(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "episode": self.episode,
            "total_steps": self.total_steps,
            "agent_counter": self._agent_counter(),
            "rng": {name: g.bit_generator.state for name, g in sorted(self.streams.items())},
            "metrics": self.metrics,
        }
        return meta, self.agent.state_tensors()

    def restore(self, meta: dict, tensors: dict[str, np.ndarray]) -> None:
        self.agent.load_state_tensors(tensors)
        self._set_agent_counter(int(meta["agent_counter"]))
        self.episode = int(meta["episode"])
        self.total_steps = int(meta["total_steps"])
        self.metrics = [dict(row) for row in meta["metrics"]]
        for name, state in meta["rng"].items():
            if name not in self.streams:
                raise KeyError(f"checkpoint has unknown random stream {name!r}")
            self.streams[name].bit_generator.state = state

"""Reproducible experiment routines shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..agents.common import EpisodeResult
from ..agents.drqn import FragmentBatch, RecurrentQNet, drqn_loss_and_grads
from ..agents.tabular import ChainMdp, run_chain_q_learning, table_array, value_iteration
from ..agents.train import GreedyDriver, evaluate
from ..apprentice import RegressionPolicy, regression_loss_and_grads
from ..attention import GlimpseConfig, GlimpsePolicy, reinforce_surrogate_and_grads, run_position_bandit
from ..nn_engine import Mlp, MlpSpec, grad_check
from ..temporal_filters import LinearGaussianModel, compare_filters, simulate_observations
from .config import ExperimentConfig
from .experiment import build_trainer, eval_env, read_rows, train_seed


# -- tabular oracle

def chain_oracle_error(steps: int = 20_000, gamma: float = 0.9, alpha: float = 0.5, epsilon: float = 0.2,
                       seed: int = 0) -> tuple[float, float]:
    """(max-norm error against value iteration, seconds)."""
    t0 = time.perf_counter()
    mdp = ChainMdp()
    table = run_chain_q_learning(mdp, steps, alpha, gamma, epsilon, np.random.default_rng(seed))
    q_star = value_iteration(mdp, gamma)
    err = float(np.max(np.abs(table_array(table, mdp.n_states - 1) - q_star)))
    return err, time.perf_counter() - t0


# -- gradient checks on every network shape the agents use

def _squared_error_check(net: Mlp, rng: np.random.Generator, batch: int = 3, epsilon: float = 1e-5) -> float:
    x = rng.normal(size=(batch, net.spec.n_in))
    y = rng.normal(size=(batch, net.spec.n_out))

    def loss_and_grad(params):
        out, cache = net.forward(x)
        net.backward(cache, out - y)
        return 0.5 * float(np.sum((out - y) ** 2))

    return grad_check(loss_and_grad, net.params, epsilon)


def mlp_2x64_grad_error(seed: int = 0, n_in: int = 11, n_out: int = 15, epsilon: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    net = Mlp.create(MlpSpec((n_in, 64, 64, n_out)), rng, prefix="q.")
    return _squared_error_check(net, rng, epsilon=epsilon)


def lstm_fragment_grad_error(seed: int = 0, n_in: int = 11, hidden: int = 32, length: int = 5,
                             epsilon: float = 1e-5) -> float:
    """DRQN loss over a length-5 fragment with full BPTT (gamma=0 keeps the target constant).

    Targets are kept small so the loss, and with it the round-off in the
    central differences, stays well below the smallest recurrent gradients.
    """
    rng = np.random.default_rng(seed)
    net = RecurrentQNet(n_in, 15, hidden, (64,), rng)
    frag = FragmentBatch(
        obs=rng.normal(size=(2, length + 1, n_in)),
        action=rng.integers(0, 15, size=(2, length)),
        reward=0.1 * rng.normal(size=(2, length)),
        terminal=np.zeros((2, length), dtype=bool),
        mask=np.ones((2, length)),
    )
    return grad_check(lambda p: drqn_loss_and_grads(net, frag, 0.0, length), net.params, epsilon)


def glimpse_policy_grad_error(seed: int = 0, epsilon: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    policy = GlimpsePolicy.create(GlimpseConfig(9, 3), rng)
    contexts = rng.normal(size=(6, GlimpsePolicy.CONTEXT_SIZE))
    positions = rng.integers(0, policy.n_positions, size=6)
    returns = rng.normal(size=6)
    return grad_check(lambda p: reinforce_surrogate_and_grads(policy, contexts, positions, returns, 0.3),
                      policy.params, epsilon)


def regression_grad_error(seed: int = 0, n_in: int = 11, epsilon: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    policy = RegressionPolicy.create(n_in, rng)
    X = rng.normal(size=(8, n_in))
    Y = rng.normal(size=(8, 2))
    return grad_check(lambda p: regression_loss_and_grads(policy.net, X, Y), policy.params, epsilon)


def all_grad_errors(seed: int = 0) -> dict[str, float]:
    return {
        "mlp_2x64": mlp_2x64_grad_error(seed),
        "lstm32_fragment5": lstm_fragment_grad_error(seed),
        "glimpse_policy": glimpse_policy_grad_error(seed),
        "regression_mlp": regression_grad_error(seed),
    }


# -- multi-seed training

@dataclass
class SeedRun:
    seed: int
    metrics: list[dict]
    eval: list[EpisodeResult]

    @property
    def first_lap_episode(self) -> float:
        return next((float(r["episode"]) for r in self.metrics if r["lap_completed"]), float("inf"))

    @property
    def eval_on_track_fraction(self) -> float:
        return float(np.mean([r.on_track_fraction for r in self.eval]))

    @property
    def eval_steer_delta(self) -> float:
        return float(np.mean([r.mean_abs_steer_delta for r in self.eval]))

    @property
    def eval_laps(self) -> int:
        return sum(r.lap_completed for r in self.eval)


def train_and_evaluate(cfg: ExperimentConfig, seed: int) -> SeedRun:
    trainer = build_trainer(cfg, seed)
    trainer.run()
    results = evaluate(GreedyDriver(trainer.agent, cfg.actions), eval_env(cfg, seed), cfg.experiment.eval_episodes)
    return SeedRun(seed, trainer.metrics, results)


def run_seeds(cfg: ExperimentConfig, seeds, out: Path | None = None) -> list[SeedRun]:
    """Train every seed; with ``out`` the standard run files are written too."""
    runs = []
    for s in seeds:
        if out is None:
            runs.append(train_and_evaluate(cfg, s))
        else:
            summary = train_seed(cfg, s, Path(out))
            runs.append(SeedRun(s, _read_metrics(Path(out) / f"seed_{s}" / "metrics.csv"), summary["eval"]))
    return runs


def _read_metrics(path: Path) -> list[dict]:
    _, rows = read_rows(path)
    return [{"episode": int(r["episode"]), "lap_completed": r["lap_completed"] == "true",
             "total_reward": float(r["total_reward"])} for r in rows]


def reward_improvement(run: SeedRun, fraction: float = 0.1) -> float:
    """Mean episode return over the last ``fraction`` of training minus the first."""
    rewards = [float(r["total_reward"]) for r in run.metrics]
    k = max(1, int(len(rewards) * fraction))
    return float(np.mean(rewards[-k:]) - np.mean(rewards[:k]))


def median(values) -> float:
    return float(np.median(np.asarray(list(values), dtype=float)))


# -- canned configurations

LANE_KEEPING_STEPS = 40_000
FLICKER_STEPS = 100_000


def lane_keeping_config(agent: str = "dqn", replay: bool = True, steps: int = LANE_KEEPING_STEPS) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg = cfg.replace("experiment", agent=agent, track="gentle-s", episodes=1500, total_steps=steps, eval_episodes=10)
    for section in ("dqn", "ddac", "drqn"):
        cfg = cfg.replace(section, replay=replay)
    return cfg


def flicker_config(agent: str, steps: int = FLICKER_STEPS) -> ExperimentConfig:
    cfg = lane_keeping_config(agent, steps=steps).replace("env", flicker=True, p_flicker=0.5)
    return cfg.replace("experiment", episodes=10_000)


def apprentice_config(episodes: int = 30) -> ExperimentConfig:
    cfg = ExperimentConfig().replace("experiment", agent="apprentice", track="gentle-s", episodes=episodes,
                                     total_steps=0, eval_episodes=5)
    return cfg.replace("apprentice", handover_episodes=episodes)


# -- filters

def filter_l1_by_grid(grids=(251, 501, 1001, 2001, 4001), steps: int = 50, seed: int = 0,
                      model: LinearGaussianModel = LinearGaussianModel()) -> dict[int, float]:
    """Worst per-step L1 distance between grid and Kalman posteriors for each grid size."""
    obs = simulate_observations(model, steps, np.random.default_rng(seed))
    return {n: max(r["l1_distance"] for r in compare_filters(model, obs, n)) for n in grids}


# -- glimpse

def glimpse_bandit_prob(episodes: int = 2000, lr: float = 0.05, seed: int = 0) -> float:
    policy = GlimpsePolicy.create(GlimpseConfig(2, 1), np.random.default_rng(seed))
    run_position_bandit(policy, [1.0, 0.0], episodes, lr, np.random.default_rng(seed + 1))
    return float(policy.probs(np.zeros(GlimpsePolicy.CONTEXT_SIZE))[0])


def glimpse_identity_config(episodes: int = 20, steps: int = 4000) -> tuple[ExperimentConfig, ExperimentConfig]:
    """(plain DQN, glimpse-DQN with a full-width window) on the same budget."""
    base = lane_keeping_config("dqn", steps=steps).replace("experiment", episodes=episodes, eval_episodes=2)
    full = base.replace("experiment", agent="glimpse-dqn").replace("glimpse", window=base.env.n_rays)
    return base, full


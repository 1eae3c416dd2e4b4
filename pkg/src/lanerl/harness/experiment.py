"""Builds environments, agents and trainers from an ExperimentConfig and writes run outputs."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import fields
from pathlib import Path

import numpy as np

from ..agents.common import METRIC_COLUMNS, EpisodeResult
from ..agents.ddac import DdacAgent
from ..agents.dqn import DqnAgent
from ..agents.drqn import DrqnAgent
from ..agents.tabular import TabularAgent
from ..agents.train import DivergenceError, GreedyDriver, Trainer, evaluate, metric_columns
from ..apprentice import ApprenticeAgent, ExpertConfig, expert_action, true_observation
from ..attention import GlimpseDqnAgent
from ..sim_core import DrivingEnv, feature_size, load_track
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, load_config
from .seeding import EVAL_STREAMS, TRAIN_STREAMS, make_streams

OUTPUT_DIR_ENV = "LANERL_OUTPUT_DIR"
EVAL_COLUMNS = ("episode", "steps", "total_reward", "on_track_fraction", "mean_abs_steer_delta", "departed",
                "lap_completed")


def build_agent(cfg: ExperimentConfig, streams: dict[str, np.random.Generator]):
    kind = cfg.experiment.agent
    n_in = feature_size(cfg.env)
    n_act = cfg.actions.n
    steps = cfg.schedule_steps
    if kind == "qtable":
        return TabularAgent(n_act, cfg.qtable, steps, streams["explore"])
    if kind == "dqn":
        return DqnAgent(n_in, n_act, cfg.dqn, steps, streams["init"], streams["explore"], streams["replay"])
    if kind == "ddac":
        return DdacAgent(n_in, cfg.ddac, steps, streams["init"], streams["explore"], streams["replay"])
    if kind == "drqn":
        return DrqnAgent(n_in, n_act, cfg.drqn, steps, streams["init"], streams["explore"], streams["replay"])
    if kind == "glimpse-dqn":
        return GlimpseDqnAgent(cfg.env.n_rays, n_act, cfg.dqn, cfg.glimpse, steps, streams["init"],
                               streams["explore"], streams["replay"], streams["glimpse"])
    if kind == "apprentice":
        return ApprenticeAgent(n_in, cfg.apprentice, cfg.apprentice.handover_episodes, streams["init"],
                               streams["blend"], streams["fit"])
    raise ValueError(f"unknown agent kind {kind!r}")


def build_trainer(cfg: ExperimentConfig, seed: int) -> Trainer:
    streams = make_streams(seed, TRAIN_STREAMS)
    track = load_track(cfg.experiment.track)
    env = DrivingEnv(track, cfg.env, streams["env"], streams["flicker"])
    agent = build_agent(cfg, streams)
    e = cfg.experiment
    return Trainer(env, agent, cfg.actions, e.episodes, streams, e.total_steps if e.total_steps > 0 else None)


def eval_env(cfg: ExperimentConfig, seed: int, track: str | None = None) -> DrivingEnv:
    streams = make_streams(seed, EVAL_STREAMS)
    return DrivingEnv(load_track(track or cfg.experiment.track), cfg.env, streams["eval-env"],
                      streams["eval-flicker"])


class ExpertDriver:
    """The proportional controller as a driver; it reads the true (unblanked) state."""

    def __init__(self, cfg: ExpertConfig = ExpertConfig()):
        self.cfg = cfg

    def __call__(self, env: DrivingEnv, obs):
        return expert_action(env.state, true_observation(env), self.cfg)


# -- csv helpers

def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_rows_to(fh, columns, rows) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_cell(row[c]) for c in columns])


def write_rows(path: str | Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        write_rows_to(fh, columns, rows)


def read_rows(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return list(r.fieldnames or []), list(r)


def result_dict(i: int, res: EpisodeResult) -> dict:
    row = {"episode": i}
    for f in fields(res):
        row[f.name] = getattr(res, f.name)
    return row


# -- run orchestration

def resolve_output_dir(cfg: ExperimentConfig, cli_out: str | None = None) -> Path:
    if cli_out:
        return Path(cli_out)
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg.experiment.output_dir)


def seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed_{seed}"


def train_seed(cfg: ExperimentConfig, seed: int, out: Path, trainer: Trainer | None = None) -> dict:
    """Train one seed and write metrics.csv, checkpoint.ckpt and eval.csv under ``out/seed_<seed>``.

    On divergence the completed episodes are still written before re-raising.
    """
    d = seed_dir(out, seed)
    d.mkdir(parents=True, exist_ok=True)
    config_text = dump_config(cfg)
    trainer = trainer if trainer is not None else build_trainer(cfg, seed)
    cols = metric_columns(trainer.agent)
    every = cfg.experiment.checkpoint_every

    def on_episode(row):
        if every > 0 and trainer.episode % every == 0:
            save_checkpoint(d / "checkpoint.ckpt", config_text, trainer.agent.kind, seed, *trainer.snapshot())

    try:
        trainer.run(on_episode)
    except DivergenceError as exc:
        write_rows(d / "metrics.csv", cols, exc.metrics)
        raise
    write_rows(d / "metrics.csv", cols, trainer.metrics)
    save_checkpoint(d / "checkpoint.ckpt", config_text, trainer.agent.kind, seed, *trainer.snapshot())
    results = evaluate(GreedyDriver(trainer.agent, cfg.actions), eval_env(cfg, seed), cfg.experiment.eval_episodes)
    write_rows(d / "eval.csv", EVAL_COLUMNS, [result_dict(i, r) for i, r in enumerate(results)])
    return {"seed": seed, "episodes": trainer.episode, "eval": results}


def resume_trainer(checkpoint: str | Path) -> tuple[ExperimentConfig, int, Trainer]:
    meta, tensors = load_checkpoint(checkpoint)
    cfg = load_config(meta["config"])
    seed = int(meta["seed"])
    trainer = build_trainer(cfg, seed)
    trainer.restore(meta["trainer"], tensors)
    return cfg, seed, trainer


def load_driver(checkpoint: str | Path):
    """(config, greedy driver) for a saved agent."""
    cfg, _, trainer = resume_trainer(checkpoint)
    return cfg, GreedyDriver(trainer.agent, cfg.actions)


def write_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))


# -- summaries

STAT_COLUMNS = ("statistic", "steps", "total_reward", "on_track_fraction", "mean_abs_steer_delta", "departed",
                "lap_completed")


def summarize_results(results: list[EpisodeResult]) -> list[dict]:
    rows = []
    for name, fn in (("mean", np.mean), ("median", np.median), ("min", np.min)):
        row = {"statistic": name}
        for c in STAT_COLUMNS[1:]:
            vals = np.array([float(getattr(r, c)) for r in results]) if results else np.array([np.nan])
            row[c] = float(fn(vals))
        rows.append(row)
    return rows


def compare_runs(dir_a: str | Path, dir_b: str | Path) -> list[dict]:
    """Seed-median comparison of two run directories (delta = b - a)."""
    stats = [_run_stats(Path(dir_a)), _run_stats(Path(dir_b))]
    rows = []
    for metric in ("first_lap_episode", "final_on_track_fraction", "mean_abs_steer_delta"):
        a = np.array([s[metric] for s in stats[0]])
        b = np.array([s[metric] for s in stats[1]])
        ma, mb = float(np.median(a)), float(np.median(b))
        rows.append({
            "metric": metric,
            "a_median": ma, "b_median": mb,
            "delta": mb - ma if not (math.isinf(ma) and math.isinf(mb)) else 0.0,
            "a_min": float(a.min()), "a_max": float(a.max()),
            "b_min": float(b.min()), "b_max": float(b.max()),
            "a_seeds": len(a), "b_seeds": len(b),
        })
    return rows


COMPARE_COLUMNS = ("metric", "a_median", "b_median", "delta", "a_min", "a_max", "b_min", "b_max", "a_seeds",
                   "b_seeds")


def _as_bool(s: str) -> bool:
    return s.strip().lower() in ("true", "1")


def _run_stats(run: Path) -> list[dict]:
    seeds = sorted(p for p in run.glob("seed_*") if (p / "metrics.csv").exists())
    if not seeds:
        raise ValueError(f"{run} has no seed_*/metrics.csv")
    out = []
    for d in seeds:
        cols, rows = read_rows(d / "metrics.csv")
        if tuple(cols[:len(METRIC_COLUMNS)]) != METRIC_COLUMNS:
            raise ValueError(f"{d / 'metrics.csv'} does not have the metrics schema")
        first = next((int(r["episode"]) for r in rows if _as_bool(r["lap_completed"])), math.inf)
        source = rows[-1:]
        if (d / "eval.csv").exists():
            ecols, erows = read_rows(d / "eval.csv")
            if tuple(ecols) != EVAL_COLUMNS:
                raise ValueError(f"{d / 'eval.csv'} does not have the evaluation schema")
            source = erows or source
        if not source:
            raise ValueError(f"{d} has no episodes to summarize")
        out.append({
            "first_lap_episode": float(first),
            "final_on_track_fraction": float(np.mean([float(r["on_track_fraction"]) for r in source])),
            "mean_abs_steer_delta": float(np.mean([float(r["mean_abs_steer_delta"]) for r in source])),
        })
    return out

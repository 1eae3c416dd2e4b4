"""Command line entry point: ``lanerl train | eval | compare | demo``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..agents.train import DivergenceError, drive_episode, evaluate
from ..apprentice import ExpertConfig
from ..nn_engine import CheckpointFormatError
from ..sim_core import TrackError
from .config import ConfigError, load_config, load_config_file
from .experiment import (COMPARE_COLUMNS, STAT_COLUMNS, ExpertDriver, compare_runs, eval_env, load_driver,
                         resolve_output_dir, resume_trainer, summarize_results, train_seed, write_config,
                         write_rows, write_rows_to)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
TRAJECTORY_COLUMNS = ("t", "s", "d", "psi", "v", "steer", "accel", "brake", "reward")


def _config_from_args(args):
    overrides = list(args.set or [])
    if getattr(args, "episodes", None) is not None:
        overrides.append(f"experiment.episodes={args.episodes}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"experiment.seeds={args.seed}")
    if getattr(args, "no_replay", False):
        overrides += ["dqn.replay=false", "ddac.replay=false", "drqn.replay=false"]
    if getattr(args, "agent", None):
        overrides.append(f"experiment.agent={args.agent}")
    if getattr(args, "track", None):
        overrides.append(f"experiment.track={args.track}")
    if args.config:
        return load_config_file(args.config, overrides)
    return load_config("", overrides)


def cmd_train(args) -> int:
    if args.resume:
        cfg, seed, trainer = resume_trainer(args.resume)
        out = resolve_output_dir(cfg, args.out)
        write_config(cfg, out)
        train_seed(cfg, seed, out, trainer)
        print(f"resumed seed {seed} to episode {trainer.episode}; outputs in {out}")
        return EXIT_OK
    cfg = _config_from_args(args)
    out = resolve_output_dir(cfg, args.out)
    write_config(cfg, out)
    for seed in cfg.experiment.seeds:
        summary = train_seed(cfg, seed, out)
        laps = sum(r.lap_completed for r in summary["eval"])
        print(f"seed {seed}: {summary['episodes']} episodes, greedy laps {laps}/{len(summary['eval'])}")
    print(f"outputs in {out}")
    return EXIT_OK


def _driver_for(args):
    if args.expert:
        cfg = _config_from_args(args)
        a = cfg.apprentice
        return cfg, ExpertDriver(ExpertConfig(a.k_steer, a.k_psi, a.v_target, a.k_speed))
    if not args.checkpoint:
        raise ConfigError("give a checkpoint path or --expert")
    return load_driver(args.checkpoint)


def cmd_eval(args) -> int:
    cfg, driver = _driver_for(args)
    env = eval_env(cfg, args.seed if args.seed is not None else 0, args.track)
    results = evaluate(driver, env, args.episodes)
    rows = summarize_results(results)
    if args.out:
        write_rows(args.out, STAT_COLUMNS, rows)
    else:
        write_rows_to(sys.stdout, STAT_COLUMNS, rows)
    laps = sum(r.lap_completed for r in results)
    departed = sum(r.departed for r in results)
    print(f"{len(results)} episodes on {env.track.name}: laps {laps}, departures {departed}, "
          f"median on_track_fraction {rows[1]['on_track_fraction']:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = compare_runs(args.run_a, args.run_b)
    out = args.out or str(Path(args.run_b) / "compare.csv")
    write_rows(out, COMPARE_COLUMNS, rows)
    for r in rows:
        print(f"{r['metric']}: a={r['a_median']:.4g} b={r['b_median']:.4g} delta={r['delta']:+.4g}")
    return EXIT_OK


def cmd_demo(args) -> int:
    cfg, driver = _driver_for(args)
    env = eval_env(cfg, args.seed if args.seed is not None else 0, args.track)
    rows = []

    def on_step(t, prev, action, reward):
        a = action.clamped()
        rows.append({"t": t, "s": prev.s, "d": prev.d, "psi": prev.psi, "v": prev.v, "steer": a.steer,
                     "accel": a.accel, "brake": a.brake, "reward": reward})

    res = drive_episode(driver, env, on_step)
    out = args.out or "trajectory.csv"
    write_rows(out, TRAJECTORY_COLUMNS, rows)
    print(f"{res.steps} steps, lap_completed={res.lap_completed}, departed={res.departed}; wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanerl", description="Lane-keeping reinforcement learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train agents and write metrics, checkpoints and evaluations")
    common(t)
    t.add_argument("--agent")
    t.add_argument("--track")
    t.add_argument("--episodes", type=int)
    t.add_argument("--no-replay", action="store_true", help="train on the latest transition only")
    t.add_argument("--out", help="output directory (overrides the config and LANERL_OUTPUT_DIR)")
    t.add_argument("--resume", help="continue from a checkpoint, using its config")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "greedy evaluation statistics"),
                                 ("demo", cmd_demo, "dump one per-step trajectory")):
        e = sub.add_parser(name, help=helptext)
        common(e)
        e.add_argument("checkpoint", nargs="?")
        e.add_argument("--expert", action="store_true", help="drive with the proportional controller")
        e.add_argument("--track")
        e.add_argument("--out")
        if name == "eval":
            e.add_argument("--episodes", type=int, default=10)
        e.set_defaults(func=func)

    c = sub.add_parser("compare", help="seed-median comparison of two run directories")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TrackError, CheckpointFormatError, FileNotFoundError) as exc:
        print(f"lanerl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"lanerl: diverged: {exc} (partial metrics kept)", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

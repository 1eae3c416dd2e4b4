"""Fast numerical checks: tabular oracle, gradient checks, filter convergence, glimpse bandit, apprentice.

    python3 scripts/quick_checks.py --out runs/checks
"""

import argparse
from pathlib import Path

import numpy as np

from lanerl.harness.experiment import build_trainer, eval_env
from lanerl.harness.seeding import stream
from lanerl.harness.studies import (all_grad_errors, apprentice_config, chain_oracle_error, filter_l1_by_grid,
                                    glimpse_bandit_prob)
from lanerl.temporal_filters import LinearGaussianModel, compare_filters, simulate_observations, write_comparison_csv


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/checks"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)

    err, seconds = chain_oracle_error(seed=args.seed)
    print(f"chain Q-learning: max error {err:.3e} in {seconds:.2f} s")
    for name, e in all_grad_errors(args.seed).items():
        print(f"grad check {name}: {e:.2e}")

    for n, l1 in filter_l1_by_grid(seed=args.seed).items():
        print(f"grid {n}: worst L1 {l1:.3e}")
    model = LinearGaussianModel()
    obs = simulate_observations(model, 50, np.random.default_rng(args.seed))
    write_comparison_csv(compare_filters(model, obs, 4001), args.out / "filters_4001.csv")

    print(f"glimpse bandit pi(best): {glimpse_bandit_prob(seed=args.seed):.4f}")

    cfg = apprentice_config()
    trainer = build_trainer(cfg, args.seed)
    trainer.run()
    env, rng = eval_env(cfg, args.seed), stream(args.seed, "eval-blend")
    for i in range(cfg.experiment.eval_episodes):
        res, speed = trainer.agent.evaluate_episode(env, rng)
        print(f"apprentice eval {i}: lap {res.lap_completed}, mean speed {speed:.2f}")


if __name__ == "__main__":
    main()

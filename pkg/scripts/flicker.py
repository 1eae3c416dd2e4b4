"""DQN against DRQN on gentle-s with observations blanked half of the time.

    python3 scripts/flicker.py --out runs/flicker --seeds 0 1 2 3 4
"""

import argparse
from pathlib import Path

from lanerl.harness.experiment import COMPARE_COLUMNS, compare_runs, write_rows
from lanerl.harness.studies import FLICKER_STEPS, flicker_config, median, run_seeds


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/flicker"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, default=FLICKER_STEPS)
    args = ap.parse_args(argv)
    medians = {}
    for agent in ("dqn", "drqn"):
        runs = run_seeds(flicker_config(agent, args.steps), args.seeds, args.out / agent)
        medians[agent] = median(r.eval_on_track_fraction for r in runs)
        print(f"{agent}: greedy on-track median {medians[agent]:.4f}, laps per seed {[r.eval_laps for r in runs]}")
    print(f"drqn - dqn on-track: {medians['drqn'] - medians['dqn']:+.4f}")
    write_rows(args.out / "compare.csv", COMPARE_COLUMNS, compare_runs(args.out / "dqn", args.out / "drqn"))


if __name__ == "__main__":
    main()

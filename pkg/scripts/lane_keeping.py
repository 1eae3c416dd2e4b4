"""Lane keeping on gentle-s: DQN, DDAC and replay-off DQN over several seeds.

Writes one run directory per configuration plus compare CSVs, e.g.

    python3 scripts/lane_keeping.py --out runs/lane --seeds 0 1 2 3 4
"""

import argparse
from pathlib import Path

from lanerl.harness.experiment import COMPARE_COLUMNS, compare_runs, write_rows
from lanerl.harness.studies import LANE_KEEPING_STEPS, lane_keeping_config, median, reward_improvement, run_seeds

CONFIGS = {
    "dqn": lambda steps: lane_keeping_config("dqn", steps=steps),
    "ddac": lambda steps: lane_keeping_config("ddac", steps=steps),
    "dqn-no-replay": lambda steps: lane_keeping_config("dqn", replay=False, steps=steps),
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/lane"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, default=LANE_KEEPING_STEPS)
    args = ap.parse_args(argv)
    for name, make in CONFIGS.items():
        runs = run_seeds(make(args.steps), args.seeds, args.out / name)
        print(f"{name}: median first lap {median(r.first_lap_episode for r in runs):g}, "
              f"greedy on-track {median(r.eval_on_track_fraction for r in runs):.4f}, "
              f"steer delta {median(r.eval_steer_delta for r in runs):.4f}, "
              f"return gain {median(reward_improvement(r) for r in runs):.1f}")
    for other in ("ddac", "dqn-no-replay"):
        rows = compare_runs(args.out / "dqn", args.out / other)
        write_rows(args.out / f"compare_dqn_vs_{other}.csv", COMPARE_COLUMNS, rows)
        for r in rows:
            print(f"dqn -> {other}: {r['metric']} delta {r['delta']:+.4g}")


if __name__ == "__main__":
    main()

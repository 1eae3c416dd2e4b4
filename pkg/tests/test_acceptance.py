"""End-to-end acceptance checks. Each test records one pass/fail line, summarized at the end of the run."""

import time

import pytest

from lanerl.agents.common import METRIC_COLUMNS
from lanerl.harness import cli
from lanerl.harness.checkpoint import save_checkpoint
from lanerl.harness.config import dump_config, load_config
from lanerl.harness.experiment import build_trainer, eval_env, read_rows, resume_trainer, train_seed
from lanerl.harness.seeding import stream
from lanerl.harness.studies import (all_grad_errors, apprentice_config, chain_oracle_error, filter_l1_by_grid,
                                    flicker_config, glimpse_bandit_prob, glimpse_identity_config,
                                    lane_keeping_config, median, reward_improvement, run_seeds)

SEEDS = (0, 1, 2, 3, 4)
EPISODE_BUDGET = 1500
AGENTS = ("qtable", "dqn", "ddac", "drqn", "glimpse-dqn", "apprentice")
SMALL = ["experiment.total_steps=600", "experiment.eval_episodes=2", "dqn.learn_start=50", "ddac.learn_start=50",
         "drqn.learn_start=50", "apprentice.handover_episodes=3", "apprentice.epochs_per_episode=1"]

pytestmark = pytest.mark.slow


@pytest.fixture
def report(record_property):
    def _report(n, detail):
        record_property("criterion", n)
        record_property("detail", detail)
        print(f"criterion {n}: {detail}")
    return _report


class RunCache:
    """Multi-seed runs shared between criteria, each trained once and timed."""

    CONFIGS = {
        "dqn": lambda: lane_keeping_config("dqn"),
        "ddac": lambda: lane_keeping_config("ddac"),
        "dqn-no-replay": lambda: lane_keeping_config("dqn", replay=False),
        "dqn-flicker": lambda: flicker_config("dqn"),
        "drqn-flicker": lambda: flicker_config("drqn"),
    }

    def __init__(self, root):
        self.root = root
        self.runs = {}
        self.seconds = {}

    def get(self, name):
        if name not in self.runs:
            t0 = time.perf_counter()
            self.runs[name] = run_seeds(self.CONFIGS[name](), SEEDS, self.root / name)
            self.seconds[name] = time.perf_counter() - t0
        return self.runs[name]

    def dir(self, name):
        self.get(name)
        return self.root / name


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return RunCache(tmp_path_factory.mktemp("acceptance"))


def test_criterion_1_tabular_oracle(report):
    err, seconds = chain_oracle_error()
    report(1, f"chain Q-learning max error {err:.2e} (< 1e-3) in {seconds:.2f} s (< 1 s)")
    assert err < 1e-3 and seconds < 1.0


def test_criterion_2_gradient_fidelity(report):
    t0 = time.perf_counter()
    errors = all_grad_errors()
    seconds = time.perf_counter() - t0
    shown = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    report(2, f"relative errors {shown} (< 1e-4) in {seconds:.1f} s (< 30 s)")
    assert max(errors.values()) < 1e-4 and seconds < 30


def test_criterion_3_dqn_lane_keeping(runs, report):
    dqn = runs.get("dqn")
    first = median(r.first_lap_episode for r in dqn)
    otf = median(r.eval_on_track_fraction for r in dqn)
    seconds = runs.seconds["dqn"]
    report(3, f"median first lap episode {first:g} (< {EPISODE_BUDGET}), median greedy on-track {otf:.4f} (= 1.0), "
              f"eval laps {[r.eval_laps for r in dqn]}, {seconds / 60:.1f} min (< 15)")
    assert first < EPISODE_BUDGET and otf == 1.0 and seconds < 15 * 60


def test_criterion_4_ddac_smoothness(runs, report):
    dqn, ddac = runs.get("dqn"), runs.get("ddac")
    a = median(r.eval_steer_delta for r in dqn)
    b = median(r.eval_steer_delta for r in ddac)
    seconds = runs.seconds["ddac"]
    report(4, f"median greedy steer delta DDAC {b:.4f} vs DQN {a:.4f} (DDAC strictly lower), "
              f"{seconds / 60:.1f} min (< 15)")
    assert b < a and seconds < 15 * 60


def test_criterion_5_replay_ablation(runs, report, tmp_path):
    on, off = runs.get("dqn"), runs.get("dqn-no-replay")
    out = tmp_path / "compare.csv"
    code = cli.main(["compare", str(runs.dir("dqn")), str(runs.dir("dqn-no-replay")), "--out", str(out)])
    _, rows = read_rows(out)
    delta = next(float(r["delta"]) for r in rows if r["metric"] == "first_lap_episode")
    first_on = median(r.first_lap_episode for r in on)
    first_off = median(r.first_lap_episode for r in off)
    direction = "replay-off faster" if delta < 0 else "replay-off slower" if delta > 0 else "no difference"
    report(5, f"median first lap replay-on {first_on:g}, replay-off {first_off:g} (both < {EPISODE_BUDGET}); "
              f"compare delta {delta:+g} ({direction}, not gated)")
    assert code == 0 and first_on < EPISODE_BUDGET and first_off < EPISODE_BUDGET


def test_criterion_6_recurrence_under_flicker(runs, report):
    dqn, drqn = runs.get("dqn-flicker"), runs.get("drqn-flicker")
    a = median(r.eval_on_track_fraction for r in dqn)
    b = median(r.eval_on_track_fraction for r in drqn)
    seconds = runs.seconds["dqn-flicker"] + runs.seconds["drqn-flicker"]
    report(6, f"median greedy on-track DRQN {b:.4f} - DQN {a:.4f} = {b - a:.4f} (>= 0.1); eval laps DRQN "
              f"{[r.eval_laps for r in drqn]} DQN {[r.eval_laps for r in dqn]}; {seconds / 60:.1f} min (< 25)")
    assert b - a >= 0.1 and seconds < 25 * 60


def test_criterion_7_apprenticeship(report):
    t0 = time.perf_counter()
    cfg = apprentice_config()
    trainer = build_trainer(cfg, 0)
    trainer.run()
    env, rng = eval_env(cfg, 0), stream(0, "eval-blend")
    episodes = [trainer.agent.evaluate_episode(env, rng) for _ in range(cfg.experiment.eval_episodes)]
    seconds = time.perf_counter() - t0
    v = cfg.apprentice.v_target
    ok = [res.lap_completed and abs(speed - v) <= 0.2 * v for res, speed in episodes]
    speeds = ", ".join(f"{speed:.2f}" for _, speed in episodes)
    report(7, f"cloned policy laps {sum(r.lap_completed for r, _ in episodes)}/{len(episodes)}, mean speeds [{speeds}] "
              f"(within 20% of {v:g}), {seconds:.0f} s (< 300)")
    assert len(episodes) == 5 and all(ok) and seconds < 300


def test_criterion_8_filter_correspondence(report):
    t0 = time.perf_counter()
    l1 = filter_l1_by_grid()
    seconds = time.perf_counter() - t0
    values = [l1[n] for n in sorted(l1)]
    decreasing = all(b < a for a, b in zip(values, values[1:]))
    shown = ", ".join(f"{n}: {v:.1e}" for n, v in sorted(l1.items()))
    report(8, f"worst L1 by grid size {{{shown}}} (< 1e-2 at 4001, decreasing {decreasing}), {seconds:.1f} s (< 10)")
    assert l1[4001] < 1e-2 and decreasing and seconds < 10


def _metric_prefix(path):
    n = len(METRIC_COLUMNS)
    return [",".join(line.split(",")[:n]) for line in path.read_text().splitlines()]


def test_criterion_9_glimpse(tmp_path, report):
    t0 = time.perf_counter()
    base, full = glimpse_identity_config()
    train_seed(base, 0, tmp_path / "dqn")
    train_seed(full, 0, tmp_path / "glimpse")
    a, b = _metric_prefix(tmp_path / "dqn" / "seed_0" / "metrics.csv"), _metric_prefix(
        tmp_path / "glimpse" / "seed_0" / "metrics.csv")
    identical = a == b and len(a) > 1
    prob = glimpse_bandit_prob()
    K = full.env.n_rays
    multiplies = {k: build_trainer(full.replace("glimpse", window=k), 0).agent.extra_metrics()[
        "sensor_multiplies_per_step"] for k in range(1, K + 1)}
    exact = all(multiplies[k] / multiplies[K] == k / K for k in multiplies)
    first_layer_inputs = build_trainer(full.replace("glimpse", window=3), 0).agent.dqn.q.params["q.W0"].shape[0]
    seconds = time.perf_counter() - t0
    report(9, f"k=K metrics identical {identical} ({len(a) - 1} episodes), bandit pi(best) {prob:.4f} (> 0.95), "
              f"multiply ratio k/K exact {exact}, {seconds:.0f} s (< 120)")
    assert identical and prob > 0.95 and exact and first_layer_inputs == 3 + 2 and seconds < 120


def test_criterion_10_determinism_and_resume(tmp_path, report):
    same, resumed = [], []
    for agent in AGENTS:
        cfg = load_config("", [f"experiment.agent={agent}", "experiment.episodes=5", *SMALL])
        for name in ("a", "b"):
            train_seed(cfg, 3, tmp_path / agent / name)
        files = ("metrics.csv", "eval.csv", "checkpoint.ckpt")
        same.append(all((tmp_path / agent / "a" / "seed_3" / f).read_bytes() ==
                        (tmp_path / agent / "b" / "seed_3" / f).read_bytes() for f in files))
        trainer = build_trainer(cfg, 3)
        trainer.run(stop_after=2)
        ckpt = tmp_path / agent / "mid.ckpt"
        save_checkpoint(ckpt, dump_config(cfg), agent, 3, *trainer.snapshot())
        cfg2, seed, trainer2 = resume_trainer(ckpt)
        train_seed(cfg2, seed, tmp_path / agent / "resumed", trainer2)
        resumed.append(all((tmp_path / agent / "a" / "seed_3" / f).read_bytes() ==
                           (tmp_path / agent / "resumed" / "seed_3" / f).read_bytes()
                           for f in ("metrics.csv", "eval.csv")))
    report(10, f"repeat byte-identical {sum(same)}/{len(AGENTS)} agents, mid-run resume identical "
               f"{sum(resumed)}/{len(AGENTS)} agents")
    assert all(same) and all(resumed)


def test_policy_improves_over_training(runs):
    gains = {kind: median(reward_improvement(r) for r in runs.get(kind)) for kind in ("dqn", "ddac")}
    print("median return gain, last 10% minus first 10% of episodes:", gains)
    assert all(g > 0 for g in gains.values())

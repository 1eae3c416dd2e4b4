import numpy as np
import pytest
from hypothesis import given, strategies as st

from lanerl.apprentice import (ApprenticeAgent, ApprenticeConfig, DemoDataset, ExpertConfig, RegressionPolicy,
                               blended_step, collect_demos, expert_action, fit_regression, linear_handover,
                               p_controller, rollout, true_observation)
from lanerl.nn_engine import Mlp, MlpSpec, NonFiniteError
from lanerl.sim_core import ContinuousAction, DrivingEnv, EnvConfig, Observation, feature_size, load_track

GENTLE = load_track("gentle-s")


def env(seed=0, **cfg):
    return DrivingEnv(GENTLE, EnvConfig(**cfg), np.random.default_rng(seed), np.random.default_rng(seed + 100))


def test_controller_examples():
    cfg = ExpertConfig()
    assert p_controller(Observation(0.0, 12.0), cfg) == ContinuousAction(0.0, 0.0, 0.0)
    assert p_controller(Observation(0.5, 12.0), ExpertConfig(k_steer=0.8, k_psi=0.0)).steer == pytest.approx(-0.4)
    fast = p_controller(Observation(0.0, 15.0), cfg)
    assert fast.brake > 0 and fast.accel == 0
    assert p_controller(Observation(5.0, 12.0), cfg).steer == -1.0


def test_expert_config_validation():
    with pytest.raises(ValueError):
        ExpertConfig(k_steer=0)


def test_blend_frequencies():
    rng = np.random.default_rng(0)
    m, e = ContinuousAction(0.5), ContinuousAction(-0.5)
    half = [blended_step(m, e, 0.5, rng)[1] for _ in range(10_000)]
    assert 0.48 <= half.count("model") / 10_000 <= 0.52
    assert all(blended_step(m, e, 0.0, rng) == (e, "expert") for _ in range(1000))
    assert all(blended_step(m, e, 1.0, rng) == (m, "model") for _ in range(1000))


def test_handover_schedule():
    s = linear_handover(5)
    assert s[0] == 0.0 and s[-1] == 1.0 and s == sorted(s)
    assert linear_handover(1) == [1.0]


def test_expert_closed_loop_sanity():
    e = env(0)
    traj = []
    res, _ = rollout(e, ExpertConfig(), None, 0.0, np.random.default_rng(0), trajectory=traj)
    assert res.lap_completed
    assert max(abs(s.d) / GENTLE.half_width for s, _, _ in traj) < 0.5
    speeds = [s.v * np.cos(s.psi) for s, _, _ in traj[100:]]
    assert max(abs(v - 12.0) for v in speeds) < 1.2


def test_expert_reads_true_state_under_flicker():
    e = env(1, flicker=True, p_flicker=1.0)
    obs = e.reset()
    assert not obs.visible
    truth = true_observation(e)
    assert truth.visible and truth.track_pos == pytest.approx(e.state.d / GENTLE.half_width)
    assert expert_action(e.state, truth, ExpertConfig()).steer != 0


def test_pure_expert_collection_and_size_bound():
    data = collect_demos(env(2), ExpertConfig(), [0.0] * 3, None, 3, np.random.default_rng(0))
    assert set(data.sources) == {"expert"}
    assert len(data) <= 3 * 2000
    eps = data.episode_ids
    assert eps == sorted(eps) and set(eps) == {0, 1, 2}
    with pytest.raises(ValueError):
        collect_demos(env(2), ExpertConfig(), [0.0], None, 3, np.random.default_rng(0))


def test_handover_visits_off_centre_states():
    n = feature_size(EnvConfig())
    expert_only = collect_demos(env(3), ExpertConfig(), [0.0] * 50, None, 50, np.random.default_rng(0))
    model = RegressionPolicy.create(n, np.random.default_rng(1))
    mixed = collect_demos(env(3), ExpertConfig(), linear_handover(50), model, 50, np.random.default_rng(0))
    track_pos = lambda d: max(abs(x[-2]) for x in d.features)
    assert track_pos(mixed) > track_pos(expert_only)
    assert "model" in mixed.sources


def test_fit_single_row_memorized():
    data = DemoDataset()
    for _ in range(8):
        data.append(np.array([0.3, -0.1, 0.5]), ContinuousAction(0.4, 0.2, 0.0), "expert")
    policy = RegressionPolicy.create(3, np.random.default_rng(0), hidden=(8,))
    assert fit_regression(data, policy, 200, 0.1, 8, np.random.default_rng(0)) < 1e-6


def test_fit_linear_expert_held_out():
    rng = np.random.default_rng(1)
    W = np.array([[0.3, -0.2], [-0.1, 0.25], [0.2, 0.1]])
    X = rng.uniform(-1, 1, (500, 3))
    Y = X @ W
    train, test = DemoDataset(), DemoDataset()
    for i, (x, y) in enumerate(zip(X, Y)):
        (test if i % 5 == 0 else train).append(x, ContinuousAction.from_throttle(*y), "expert")
    policy = RegressionPolicy(Mlp.create(MlpSpec((3, 2)), np.random.default_rng(2), prefix="reg."))
    fit_regression(train, policy, 100, 0.1, 32, np.random.default_rng(3))
    Xt, Yt = test.arrays()
    assert np.mean(np.sum((policy.net(Xt) - Yt) ** 2, axis=1)) < 1e-3


def test_fit_zero_epochs_and_errors():
    data = DemoDataset()
    data.append(np.ones(3), ContinuousAction(0.1), "expert")
    policy = RegressionPolicy.create(3, np.random.default_rng(0), hidden=(4,))
    before = policy.params.copy()
    fit_regression(data, policy, 0, 0.1, 4, np.random.default_rng(0))
    assert all(np.array_equal(before[n], policy.params[n]) for n in before)
    with pytest.raises(ValueError):
        fit_regression(DemoDataset(), policy, 1, 0.1, 4, np.random.default_rng(0))
    with pytest.raises(NonFiniteError):
        data.append(np.array([np.nan, 0, 0]), ContinuousAction(), "expert")
    huge = DemoDataset()
    huge.append(np.full(3, 1e6), ContinuousAction(1.0, 1.0), "expert")
    with pytest.raises(NonFiniteError), np.errstate(over="ignore", invalid="ignore"):
        fit_regression(huge, RegressionPolicy(Mlp.create(MlpSpec((3, 2)), np.random.default_rng(0))), 50, 10.0, 1,
                       np.random.default_rng(0))


def test_dataset_csv_roundtrip(tmp_path):
    data = DemoDataset()
    data.append(np.array([0.1, 0.2]), ContinuousAction(0.3, 0.0, 0.4), "model", 0)
    data.append(np.array([1 / 3, -2.0]), ContinuousAction(-1.0, 0.5, 0.0), "expert", 1)
    data.write_csv(tmp_path / "d.csv", tmp_path / "src.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "feature_0,feature_1,steer,accel,brake"
    assert (tmp_path / "src.csv").read_text().splitlines() == ["row,episode,source", "0,0,model", "1,1,expert"]
    back = DemoDataset.read_csv(tmp_path / "d.csv")
    assert np.array_equal(np.array(back.features), np.array(data.features)) and back.actions == data.actions


def test_agent_state_roundtrip():
    rng = np.random.default_rng
    n = feature_size(EnvConfig())
    agent = ApprenticeAgent(n, ApprenticeConfig(), 2, rng(0), rng(1), rng(2))
    agent.run_training_episode(env(4))
    again = ApprenticeAgent(n, ApprenticeConfig(), 2, rng(0), rng(1), rng(2))
    again.load_state_tensors(agent.state_tensors())
    assert len(again.data) == len(agent.data) and again.data.sources == agent.data.sources
    assert all(np.array_equal(agent.policy.params[p], again.policy.params[p]) for p in agent.policy.params)


@given(st.floats(0, 1), st.integers(0, 1000))
def test_blend_source_matches_choice(eps, seed):
    rng = np.random.default_rng(seed)
    m, e = ContinuousAction(0.3), ContinuousAction(-0.3)
    action, source = blended_step(m, e, eps, rng)
    assert (action is m) == (source == "model")


@given(st.floats(-3, 3, allow_nan=False), st.floats(0, 40, allow_nan=False), st.floats(-1, 1, allow_nan=False))
def test_controller_outputs_are_valid_actions(tp, v, psi):
    a = p_controller(Observation(tp, v), ExpertConfig(), psi)
    assert -1 <= a.steer <= 1 and 0 <= a.accel <= 1 and 0 <= a.brake <= 1 and a.accel * a.brake == 0

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lanerl.agents.dqn import DqnConfig
from lanerl.attention import (GlimpseConfig, GlimpseDqnAgent, GlimpsePolicy, GlimpseTrainConfig, RunningBaseline,
                              attend_observe, glimpse_select, reinforce_surrogate_and_grads, reinforce_update,
                              run_position_bandit, sensor_multiplies, softmax)
from lanerl.nn_engine import Mlp, MlpSpec, NonFiniteError, grad_check
from lanerl.sim_core import CarState, Observation, TrackSpec, features, observe

STRAIGHT = TrackSpec(((1000.0, 0.0),), half_width=4.0)


def flat_policy(n_positions, bias=None):
    net = Mlp.create(MlpSpec((2, n_positions)), np.random.default_rng(0), prefix="glimpse.")
    net.params["glimpse.W0"][...] = 0
    if bias is not None:
        net.params["glimpse.b0"][...] = bias
    return GlimpsePolicy(net)


def test_config_bounds():
    assert GlimpseConfig(9, 3).n_positions == 7
    with pytest.raises(ValueError):
        GlimpseConfig(9, 10)
    with pytest.raises(ValueError):
        GlimpseConfig(9, 0)


def test_saturated_policy_always_picks_one_position():
    policy = flat_policy(4, [0, 0, 30, 0])
    rng = np.random.default_rng(0)
    assert {glimpse_select(policy, np.zeros(2), rng)[0] for _ in range(2000)} == {2}


def test_uniform_policy_frequencies():
    policy = flat_policy(5)
    rng = np.random.default_rng(1)
    counts = np.bincount([glimpse_select(policy, np.zeros(2), rng)[0] for _ in range(10_000)], minlength=5)
    assert np.all((counts >= 1800) & (counts <= 2200))


def test_log_probability_matches_softmax():
    rng = np.random.default_rng(2)
    policy = GlimpsePolicy.create(GlimpseConfig(9, 3), rng)
    c = rng.normal(size=2)
    for _ in range(20):
        pos, logp = glimpse_select(policy, c, rng)
        assert logp == pytest.approx(math.log(policy.probs(c)[pos]), abs=1e-12)


def test_select_checks_context_size():
    with pytest.raises(ValueError):
        glimpse_select(flat_policy(3), np.zeros(3), np.random.default_rng(0))


def test_zero_advantage_leaves_policy():
    policy = GlimpsePolicy.create(GlimpseConfig(9, 3), np.random.default_rng(0))
    before = policy.params.copy()
    reinforce_update(policy, [(np.ones(2), 1, 0.0), (np.zeros(2), 4, 0.0)], RunningBaseline(), 0.5)
    assert all(np.array_equal(before[n], policy.params[n]) for n in before)


def test_baseline_is_ema():
    b = RunningBaseline()
    b.update(1.0)
    b.update(1.0)
    assert b.value == pytest.approx(0.01 + 0.99 * 0.01)


def test_non_finite_return_rejected():
    policy = flat_policy(3)
    with pytest.raises(NonFiniteError):
        reinforce_update(policy, [(np.zeros(2), 0, math.nan)], RunningBaseline(), 0.1)


def test_surrogate_gradient_matches_fd():
    rng = np.random.default_rng(3)
    policy = GlimpsePolicy.create(GlimpseConfig(9, 3), rng)
    c, g, r = rng.normal(size=(5, 2)), rng.integers(0, 7, 5), rng.normal(size=5)
    assert grad_check(lambda p: reinforce_surrogate_and_grads(policy, c, g, r, 0.2), policy.params, 1e-5) < 1e-4


def test_two_position_bandit_learns():
    policy = GlimpsePolicy.create(GlimpseConfig(2, 1), np.random.default_rng(0))
    run_position_bandit(policy, [1.0, 0.0], 2000, 0.05, np.random.default_rng(1))
    assert policy.probs(np.zeros(2))[0] > 0.95


def test_attend_observe_windows():
    obs = observe(CarState(0, 1.0, 0.05, 10), STRAIGHT)
    cfg = GlimpseConfig(9, 3)
    x = attend_observe(obs, 0, cfg)
    assert list(x[:3]) == list(obs.ranges[:3]) and x[3] == obs.track_pos
    full = attend_observe(obs, 0, GlimpseConfig(9, 9))
    assert np.array_equal(full, features(obs))
    with pytest.raises(ValueError):
        attend_observe(Observation(0.1, 5.0, None), 0, cfg)
    with pytest.raises(IndexError):
        attend_observe(obs, 7, cfg)


def test_multiply_accounting_scales_with_window():
    assert sensor_multiplies(GlimpseConfig(9, 3), 64) * 3 == sensor_multiplies(GlimpseConfig(9, 9), 64)


def test_glimpse_agent_metrics_and_persistence():
    rng = np.random.default_rng
    make = lambda: GlimpseDqnAgent(9, 15, DqnConfig(hidden=(8,)), GlimpseTrainConfig(window=3), 100, rng(0), rng(1),
                                   rng(2), rng(3))
    agent = make()
    obs = observe(CarState(0, 0.5, 0, 8), STRAIGHT)
    x = agent.featurize(obs)
    assert x.shape == (5,)
    m = agent.extra_metrics()
    assert m["sensor_multiplies_per_step"] == 24
    other = make()
    other.load_state_tensors(agent.state_tensors())
    assert all(np.array_equal(agent.policy.params[n], other.policy.params[n]) for n in agent.policy.params)


@given(st.integers(0, 10_000), st.floats(-5, 5, allow_nan=False), st.integers(1, 9))
def test_policy_stays_categorical_after_updates(seed, ret, k):
    rng = np.random.default_rng(seed)
    policy = GlimpsePolicy.create(GlimpseConfig(9, k), rng)
    episode = [(rng.normal(size=2), int(rng.integers(policy.n_positions)), ret) for _ in range(3)]
    reinforce_update(policy, episode, RunningBaseline(), 0.5)
    p = policy.probs(rng.normal(size=2))
    assert abs(p.sum() - 1) < 1e-9 and np.all(p >= 0)


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=8))
def test_softmax_normalized(z):
    p = softmax(np.array(z))
    assert abs(p.sum() - 1) < 1e-12

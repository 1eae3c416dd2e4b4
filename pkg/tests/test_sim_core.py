import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lanerl.sim_core import (ActionSpec, CarState, ContinuousAction, DrivingEnv, EnvConfig, TrackError, TrackSpec,
                             decode_action, encode_action, features, format_track, integrate, load_track, observe,
                             parse_track, rangefinder, reset, reward, step, wrap_angle)

STRAIGHT = TrackSpec(((1000.0, 0.0),), half_width=4.0)


def hold(action, state, track, cfg=EnvConfig(), n=10_000):
    states = [state]
    for _ in range(n):
        state, _, _, done = step(state, action, track, cfg)
        states.append(state)
        if done:
            break
    return states


# -- tracks

def test_bundled_tracks_load_and_validate():
    gentle = load_track("gentle-s")
    assert gentle.length == pytest.approx(320.0)
    assert gentle.max_abs_curvature() <= 0.02
    loop = load_track("tight-loop")
    assert loop.closed and loop.max_abs_curvature() <= 0.05
    assert load_track("straight-1km").length == 1000.0
    for t in (gentle, loop):
        assert t.half_width * t.max_abs_curvature() <= 0.5


def test_track_text_roundtrip():
    t = load_track("tight-loop")
    again = parse_track(format_track(t), t.name)
    assert again.segments == t.segments and again.closed and again.half_width == t.half_width


@pytest.mark.parametrize("text", [
    "closed false\n10 0\n",                      # no half_width
    "half_width 3\n-5 0\n",                     # non-positive length
    "half_width 0\n10 0\n",
    "half_width 3\nclosed true\n10 0.1\n",      # heading change of 1 rad
    "half_width 3\n10 0 7\n",
])
def test_invalid_tracks_rejected(text):
    with pytest.raises(TrackError):
        parse_track(text)


def test_reset_rejects_invalid_track():
    with pytest.raises(TrackError):
        reset(TrackSpec((), 3.0), 0)


# -- reset / observe

def test_reset_is_deterministic_and_seed_dependent():
    a = reset(STRAIGHT, 7)
    assert a == reset(STRAIGHT, 7)
    assert a[0].d != reset(STRAIGHT, 8)[0].d
    s = a[0]
    assert s.s == 0 and s.psi == 0 and s.v == 5.0 and abs(s.d) <= 0.4


def test_track_pos_definition():
    assert observe(CarState(0, 0.0, 0, 5), STRAIGHT).track_pos == 0
    assert observe(CarState(0, 4.0, 0, 5), STRAIGHT).track_pos == 1


def test_flicker_blank_fraction_and_speed_kept():
    cfg = EnvConfig(flicker=True, p_flicker=0.5)
    rng = np.random.default_rng(0)
    state = CarState(0, 1.0, 0.1, 8.0)
    obs = [observe(state, STRAIGHT, rng, cfg) for _ in range(10_000)]
    blank = [o for o in obs if not o.visible]
    assert 0.48 <= len(blank) / len(obs) <= 0.52
    assert all(o.track_pos == 0 and set(o.ranges) == {0.0} for o in blank)
    assert all(o.speed_x == pytest.approx(8.0 * math.cos(0.1)) for o in obs)


def test_no_flicker_at_zero_probability():
    cfg = EnvConfig(flicker=True, p_flicker=0.0)
    rng = np.random.default_rng(1)
    assert all(observe(CarState(0, 0, 0, 5), STRAIGHT, rng, cfg).visible for _ in range(1000))


def test_flicker_needs_stream():
    with pytest.raises(ValueError):
        observe(CarState(0, 0, 0, 5), STRAIGHT, None, EnvConfig(flicker=True))


# -- rangefinder

def test_rangefinder_geometry():
    r = rangefinder(CarState(0, 0.0, 0.0, 5), STRAIGHT, 9, 30.0)
    assert r[0] == pytest.approx(4 / 30) and r[-1] == pytest.approx(4 / 30)
    assert r[4] == 1.0
    off = rangefinder(CarState(0, 2.0, 0.0, 5), STRAIGHT, 9, 30.0)
    assert off[-1] == pytest.approx((4 - 2) / 30)  # +90 deg looks left, the car is 2 m left of center
    assert off[0] == pytest.approx((4 + 2) / 30)
    assert rangefinder(CarState(0, 5.0, 0.0, 5), STRAIGHT, 9) == [0.0] * 9


# -- dynamics

def test_straight_no_steer_keeps_lateral_state():
    s = CarState(0, 0.7, 0.0, 10)
    nxt = integrate(s, ContinuousAction(0, 0.3, 0), STRAIGHT)
    assert nxt.d == 0.7 and nxt.psi == 0.0


def test_full_brake_saturates_at_zero():
    states = hold(ContinuousAction(0, 0, 1), CarState(0, 0, 0, 10), STRAIGHT, n=200)
    assert states[-1].v == 0.0
    assert all(s.v >= 0 for s in states)
    assert states[-2].v == 0.0


def test_one_step_matches_hand_integration():
    # independent straight-line oracle for one semi-implicit Euler step on a curved segment
    track = TrackSpec(((100.0, 0.02),), half_width=3.0)
    s0 = CarState(1.0, 0.5, 0.1, 10.0)
    L, dmax, dt, kappa = 2.5, 0.35, 0.05, 0.02
    v = 10.0 + dt * (4.0 * 0.25 - 0.02 * 100.0)
    s_dot = v * math.cos(0.1) / (1 - 0.5 * kappa)
    psi = 0.1 + dt * (v / L * math.tan(0.5 * dmax) - kappa * s_dot)
    d = 0.5 + dt * v * math.sin(psi)
    s = 1.0 + dt * v * math.cos(psi) / (1 - d * kappa)
    got = integrate(s0, ContinuousAction(0.5, 0.25, 0), track)
    assert (got.s, got.d, got.psi, got.v) == pytest.approx((s, d, psi, v), abs=1e-15)


def test_held_steer_departs_exactly_at_border():
    states = hold(ContinuousAction(0.3, 0.2, 0), CarState(0, 0, 0, 5), STRAIGHT)
    ds = [abs(s.d) for s in states]
    assert all(b > a for a, b in zip(ds[1:], ds[2:]))
    assert ds[-1] > 4.0 and all(d <= 4.0 for d in ds[:-1])


def test_lap_and_time_limit_terminate():
    loop = load_track("tight-loop")
    *_, done = step(CarState(loop.length - 0.01, 0, 0, 10), ContinuousAction(), loop)
    assert done
    *_, done = step(CarState(0, 0, 0, 1, step_count=1999), ContinuousAction(), STRAIGHT)
    assert done


# -- reward

def test_reward_cases():
    cfg = EnvConfig()
    assert reward(None, None, CarState(0, 0, 0, 10), STRAIGHT, cfg) == pytest.approx(1.0)
    assert reward(None, None, CarState(0, 2.0, 0.3, 0.0), STRAIGHT, cfg) == 0.0
    off = CarState(0, 4.5, 0.0, 5)
    assert reward(None, None, off, STRAIGHT, cfg) == pytest.approx((5 - 5 * 4.5 / 4) / 10 - 10)


# -- actions

def test_action_tiling():
    spec = ActionSpec(3, 3)
    assert encode_action(4, spec) == ContinuousAction(0, 0, 0)
    assert ContinuousAction.from_throttle(0, -1) == ContinuousAction(0, 0, 1)
    for spec in (ActionSpec(), ActionSpec(3, 3), ActionSpec(7, 2)):
        assert [decode_action(encode_action(i, spec), spec) for i in range(spec.n)] == list(range(spec.n))
    with pytest.raises(IndexError):
        encode_action(15, ActionSpec())


def test_features_layout():
    obs = observe(CarState(0, 1.0, 0, 10), STRAIGHT)
    x = features(obs)
    assert x.shape == (11,) and x[-2] == 0.25 and x[-1] == 0.5


# -- properties

finite = dict(allow_nan=False, allow_infinity=False)
actions = st.builds(ContinuousAction, st.floats(-3, 3, **finite), st.floats(-3, 3, **finite),
                    st.floats(-3, 3, **finite))


@given(st.lists(actions, min_size=1, max_size=60), st.integers(0, 2**31))
def test_dynamics_invariants(seq, seed):
    track = load_track("gentle-s")
    cfg = EnvConfig()
    state, _ = reset(track, seed, cfg)
    was_on = True
    for a in seq:
        state, obs, r, done = step(state, a, track, cfg)
        assert state.v >= 0
        assert -math.pi < state.psi <= math.pi
        assert (abs(obs.track_pos) <= 1) == (abs(state.d) <= track.half_width)
        assert was_on
        was_on = abs(state.d) <= track.half_width
        if done:
            break


@given(st.lists(actions, min_size=1, max_size=40), st.integers(0, 1000))
def test_determinism(seq, seed):
    track = load_track("gentle-s")

    def run():
        s, o = reset(track, seed)
        out = [(s, o)]
        for a in seq:
            s, o, r, d = step(s, a, track)
            out.append((s, o, r, d))
        return out

    assert run() == run()


@given(st.floats(0, 40, **finite), st.floats(-0.5, 0.5, **finite), st.floats(-2.5, 2.5, **finite))
def test_coasting_never_speeds_up(v, psi, d):
    s = CarState(10.0, d, psi, v)
    nxt = integrate(s, ContinuousAction(0.2, 0, 0), load_track("gentle-s"))
    assert nxt.v <= v


@given(st.floats(-50, 50, **finite))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_env_wrapper_matches_functional_api():
    track = load_track("gentle-s")
    env = DrivingEnv(track, EnvConfig(), np.random.default_rng(3))
    obs = env.reset()
    state, obs2 = reset(track, np.random.default_rng(3))
    assert obs == obs2
    a = ContinuousAction(0.1, 0.5, 0)
    assert env.step(a)[1] == step(state, a, track)[2]

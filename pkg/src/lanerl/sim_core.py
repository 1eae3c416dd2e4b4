"""Deterministic 2D lane-keeping simulator.

The car is integrated in track-relative coordinates (arc length ``s``,
lateral offset ``d``, heading error ``psi``) with a kinematic bicycle model.
Sensors follow the TORCS/SCR naming: ``track_pos`` is the lateral offset
normalised by the half width and ``speed_x`` the forward speed component.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

BUNDLED_TRACKS = ("straight-1km", "gentle-s", "tight-loop")


class TrackError(ValueError):
    pass


@dataclass(frozen=True)
class TrackSpec:
    segments: tuple[tuple[float, float], ...]
    half_width: float
    closed: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple((float(l), float(k)) for l, k in self.segments))
        starts, s = [], 0.0
        for length, _ in self.segments:
            starts.append(s)
            s += length
        object.__setattr__(self, "_starts", tuple(starts))
        object.__setattr__(self, "_length", s)

    @property
    def length(self) -> float:
        return self._length

    def validate(self) -> None:
        if not self.segments:
            raise TrackError("track has no segments")
        if not self.half_width > 0:
            raise TrackError(f"half_width must be > 0, got {self.half_width}")
        for i, (length, _) in enumerate(self.segments):
            if not length > 0:
                raise TrackError(f"segment {i} has non-positive length {length}")
        if self.closed:
            turn = sum(length * k for length, k in self.segments)
            laps = round(turn / (2 * math.pi))
            if abs(turn - 2 * math.pi * laps) > 1e-9 or laps == 0:
                raise TrackError(f"closed track heading change {turn} is not a multiple of 2*pi")

    def curvature(self, s: float) -> float:
        i = bisect.bisect_right(self._starts, s) - 1
        i = min(max(i, 0), len(self.segments) - 1)
        return self.segments[i][1]

    def max_abs_curvature(self) -> float:
        return max(abs(k) for _, k in self.segments)


def parse_track(text: str, name: str = "") -> TrackSpec:
    """Parse the ``.track`` text format.

    Blank lines and ``#`` comments are ignored. ``half_width <m>`` and
    ``closed <true|false>`` are keyed lines; every other line is a
    ``<length> <curvature>`` pair.
    """
    half_width, closed, segments = None, False, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "half_width":
                half_width = float(parts[1])
            elif parts[0] == "closed":
                if parts[1].lower() not in ("true", "false"):
                    raise ValueError(parts[1])
                closed = parts[1].lower() == "true"
            elif len(parts) == 2:
                segments.append((float(parts[0]), float(parts[1])))
            else:
                raise ValueError(line)
        except (IndexError, ValueError) as exc:
            raise TrackError(f"line {lineno}: cannot parse {raw!r}") from exc
    if half_width is None:
        raise TrackError("missing half_width")
    track = TrackSpec(tuple(segments), half_width, closed, name)
    track.validate()
    return track


def format_track(track: TrackSpec) -> str:
    lines = [f"half_width {track.half_width!r}", f"closed {str(track.closed).lower()}"]
    lines += [f"{length!r} {k!r}" for length, k in track.segments]
    return "\n".join(lines) + "\n"


def load_track(name_or_path: str | Path) -> TrackSpec:
    """Load a bundled track by name, or a track file by path."""
    name = str(name_or_path)
    if name in BUNDLED_TRACKS:
        text = resources.files("lanerl").joinpath("tracks", f"{name}.track").read_text()
        return parse_track(text, name)
    path = Path(name_or_path)
    return parse_track(path.read_text(), path.stem)


@dataclass(frozen=True)
class EnvConfig:
    wheelbase: float = 2.5
    max_steer_angle: float = 0.35
    max_accel: float = 4.0
    max_brake: float = 8.0
    drag: float = 0.02
    dt: float = 0.05
    v_init: float = 5.0
    init_offset_frac: float = 0.1
    max_steps: int = 2000
    n_rays: int = 9
    range_max: float = 30.0
    flicker: bool = False
    p_flicker: float = 0.5
    off_track_penalty: float = 10.0
    v_scale: float = 10.0


@dataclass(frozen=True)
class CarState:
    s: float
    d: float
    psi: float
    v: float
    step_count: int = 0


@dataclass(frozen=True)
class Observation:
    track_pos: float
    speed_x: float
    ranges: tuple[float, ...] | None = None
    visible: bool = True


@dataclass(frozen=True)
class ContinuousAction:
    steer: float = 0.0
    accel: float = 0.0
    brake: float = 0.0

    def clamped(self) -> "ContinuousAction":
        return ContinuousAction(_clamp(self.steer, -1.0, 1.0), _clamp(self.accel, 0.0, 1.0),
                                _clamp(self.brake, 0.0, 1.0))

    @classmethod
    def from_throttle(cls, steer: float, throttle: float) -> "ContinuousAction":
        """Build an action from a steer value and a combined throttle axis in [-1, 1]."""
        t = _clamp(throttle, -1.0, 1.0)
        return cls(_clamp(steer, -1.0, 1.0), max(t, 0.0), max(-t, 0.0))

    @property
    def throttle(self) -> float:
        return self.accel - self.brake


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


# -- actions -----------------------------------------------------------------

@dataclass(frozen=True)
class ActionSpec:
    """Tiling of the (steer, throttle) plane into ``n_steer * n_throttle`` actions.

    Index layout is row-major with steer as the slow axis.
    """

    n_steer: int = 5
    n_throttle: int = 3

    def __post_init__(self):
        if self.n_steer < 2 or self.n_throttle < 2:
            raise ValueError("ActionSpec needs at least 2 tiles per axis")

    @property
    def n(self) -> int:
        return self.n_steer * self.n_throttle

    def steer_centers(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.n_steer)

    def throttle_centers(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.n_throttle)


def encode_action(index: int, spec: ActionSpec) -> ContinuousAction:
    """Map a discrete action index to the continuous action at its tile center."""
    if not 0 <= index < spec.n:
        raise IndexError(f"action index {index} outside [0, {spec.n})")
    i, j = divmod(int(index), spec.n_throttle)
    steer = -1.0 + 2.0 * i / (spec.n_steer - 1)
    throttle = -1.0 + 2.0 * j / (spec.n_throttle - 1)
    return ContinuousAction.from_throttle(steer, throttle)


def decode_action(action: ContinuousAction, spec: ActionSpec) -> int:
    """Index of the tile whose center is nearest to ``action``."""
    a = action.clamped()
    i = int(round((a.steer + 1.0) * (spec.n_steer - 1) / 2.0))
    j = int(round((a.throttle + 1.0) * (spec.n_throttle - 1) / 2.0))
    return i * spec.n_throttle + j


# -- environment functions ---------------------------------------------------

def reset(track: TrackSpec, seed: int | np.random.Generator, cfg: EnvConfig = EnvConfig(),
          flicker_rng: np.random.Generator | None = None) -> tuple[CarState, Observation]:
    track.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    spread = cfg.init_offset_frac * track.half_width
    d = float(rng.uniform(-spread, spread))
    state = CarState(s=0.0, d=d, psi=0.0, v=cfg.v_init, step_count=0)
    return state, observe(state, track, flicker_rng, cfg)


def on_track(state: CarState, track: TrackSpec) -> bool:
    return abs(state.d) <= track.half_width


def lap_completed(state: CarState, track: TrackSpec) -> bool:
    return state.s >= track.length


def integrate(state: CarState, action: ContinuousAction, track: TrackSpec,
              cfg: EnvConfig = EnvConfig()) -> CarState:
    """One semi-implicit Euler step of the track-frame kinematic bicycle."""
    a = action.clamped()
    dt = cfg.dt
    kappa = track.curvature(state.s)
    v = state.v + dt * (cfg.max_accel * a.accel - cfg.max_brake * a.brake - cfg.drag * state.v * state.v)
    v = max(v, 0.0)
    denom = max(1.0 - state.d * kappa, 0.05)
    s_dot = v * math.cos(state.psi) / denom
    psi = state.psi + dt * (v / cfg.wheelbase * math.tan(a.steer * cfg.max_steer_angle) - kappa * s_dot)
    psi = wrap_angle(psi)
    d = state.d + dt * v * math.sin(psi)
    denom = max(1.0 - d * kappa, 0.05)
    s = state.s + dt * v * math.cos(psi) / denom
    return CarState(s=s, d=d, psi=psi, v=v, step_count=state.step_count + 1)


def reward(prev: CarState, action: ContinuousAction, next: CarState, track: TrackSpec,
           cfg: EnvConfig = EnvConfig()) -> float:
    """Progress along the lane minus a centering penalty, with a departure penalty."""
    track_pos = next.d / track.half_width
    r = (next.v * math.cos(next.psi) - next.v * abs(track_pos)) / cfg.v_scale
    if not on_track(next, track):
        r -= cfg.off_track_penalty
    return r


def is_terminal(state: CarState, track: TrackSpec, cfg: EnvConfig = EnvConfig()) -> bool:
    return (not on_track(state, track)) or state.step_count >= cfg.max_steps or lap_completed(state, track)


def step(state: CarState, action: ContinuousAction, track: TrackSpec, cfg: EnvConfig = EnvConfig(),
         flicker_rng: np.random.Generator | None = None) -> tuple[CarState, Observation, float, bool]:
    nxt = integrate(state, action, track, cfg)
    r = reward(state, action, nxt, track, cfg)
    return nxt, observe(nxt, track, flicker_rng, cfg), r, is_terminal(nxt, track, cfg)


def ray_angles(k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("need at least one ray")
    if k == 1:
        return np.zeros(1)
    return np.linspace(-math.pi / 2, math.pi / 2, k)


def rangefinder(state: CarState, track: TrackSpec, k: int, range_max: float = 30.0) -> list[float]:
    """Normalised border distances along ``k`` rays spread over +-90 degrees.

    Borders are treated as straight lines parallel to the local tangent.
    """
    hw = track.half_width
    if abs(state.d) > hw:
        return [0.0] * k
    readings = []
    for theta in ray_angles(k):
        lateral = math.sin(state.psi + theta)
        if lateral > 1e-12:
            dist = (hw - state.d) / lateral
        elif lateral < -1e-12:
            dist = (hw + state.d) / -lateral
        else:
            dist = range_max
        readings.append(min(dist, range_max) / range_max)
    return readings


def observe(state: CarState, track: TrackSpec, flicker_rng: np.random.Generator | None = None,
            cfg: EnvConfig = EnvConfig()) -> Observation:
    """Sensor readout. In flicker mode ``flicker_rng`` decides whether the frame is blanked."""
    track_pos = state.d / track.half_width
    speed_x = state.v * math.cos(state.psi)
    ranges = tuple(rangefinder(state, track, cfg.n_rays, cfg.range_max)) if cfg.n_rays > 0 else None
    visible = True
    if cfg.flicker:
        if flicker_rng is None:
            raise ValueError("flicker mode needs a flicker_rng")
        visible = bool(flicker_rng.random() >= cfg.p_flicker)
    if not visible:
        track_pos = 0.0
        ranges = tuple(0.0 for _ in ranges) if ranges is not None else None
    return Observation(track_pos=track_pos, speed_x=speed_x, ranges=ranges, visible=visible)


SPEED_NORM = 20.0


def features(obs: Observation) -> np.ndarray:
    """Agent input vector: ``[ranges..., track_pos, speed_x / 20]``."""
    ranges = obs.ranges or ()
    return np.array([*ranges, obs.track_pos, obs.speed_x / SPEED_NORM], dtype=np.float64)


def feature_size(cfg: EnvConfig) -> int:
    return cfg.n_rays + 2


class DrivingEnv:
    """Stateful wrapper around the functional step with its own random streams.

    Not safe for concurrent use; make one instance per worker.
    """

    def __init__(self, track: TrackSpec, cfg: EnvConfig = EnvConfig(),
                 env_rng: np.random.Generator | None = None,
                 flicker_rng: np.random.Generator | None = None):
        track.validate()
        self.track = track
        self.cfg = cfg
        self.env_rng = env_rng if env_rng is not None else np.random.default_rng(0)
        self.flicker_rng = flicker_rng if flicker_rng is not None else np.random.default_rng(1)
        self.state: CarState | None = None

    def reset(self) -> Observation:
        self.state, obs = reset(self.track, self.env_rng, self.cfg, self.flicker_rng)
        return obs

    def step(self, action: ContinuousAction) -> tuple[Observation, float, bool]:
        if self.state is None:
            raise RuntimeError("call reset() first")
        self.state, obs, r, done = step(self.state, action, self.track, self.cfg, self.flicker_rng)
        return obs, r, done

    @property
    def departed(self) -> bool:
        return not on_track(self.state, self.track)

    @property
    def lap_completed(self) -> bool:
        return lap_completed(self.state, self.track)

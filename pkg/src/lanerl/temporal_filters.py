"""Bayes, Kalman and recurrent state updates side by side.

All three share the shape ``state' = keep(state) + admit(observation)``:

======  =========================  ===================  ==============
filter  state update               observation gate     state carry
======  =========================  ===================  ==============
RNN     tanh(W_hh h + W_xh x)      W_xh                 W_hh
Kalman  (1 - K H) A h + K x        K                    (1 - K H) A
LSTM    f * c + i * g              i                    f
======  =========================  ===================  ==============

The grid (histogram) Bayes filter is the general recursion; on a
linear-Gaussian model it converges to the Kalman filter as the grid refines.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .nn_engine import LstmState, ParamSet


class DegenerateBeliefError(ValueError):
    pass


@dataclass(frozen=True)
class GridBelief:
    support: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        if self.support.shape != self.mass.shape or self.support.ndim != 1:
            raise ValueError("support and mass must be 1-D arrays of equal length")
        if np.any(self.mass < 0):
            raise ValueError("negative belief mass")
        if abs(float(self.mass.sum()) - 1.0) > 1e-12:
            raise ValueError(f"belief mass sums to {self.mass.sum()!r}")

    @classmethod
    def uniform_grid(cls, x_min: float, x_max: float, n: int, mass: np.ndarray | None = None) -> "GridBelief":
        support = np.linspace(x_min, x_max, n)
        if mass is None:
            mass = np.full(n, 1.0 / n)
        return cls(support, normalize(mass))

    @property
    def spacing(self) -> float:
        return float(self.support[1] - self.support[0])

    def mean(self) -> float:
        return float(self.mass @ self.support)

    def variance(self) -> float:
        m = self.mean()
        return float(self.mass @ (self.support - m) ** 2)


@dataclass(frozen=True)
class GaussianBelief:
    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"variance must be > 0, got {self.variance}")


def normalize(mass: np.ndarray) -> np.ndarray:
    total = float(np.sum(mass))
    if not total > 0 or not math.isfinite(total):
        raise DegenerateBeliefError("belief has no mass left to normalise")
    out = mass / total
    # second pass pulls the sum to within a few ulps of 1 for large grids
    return out / out.sum()


def _cell_edges(support: np.ndarray) -> np.ndarray:
    h = support[1] - support[0]
    return np.concatenate([support - h / 2, support[-1:] + h / 2])


def gaussian_cell_mass(support: np.ndarray, mean, variance: float) -> np.ndarray:
    """Probability mass of N(mean, variance) on each grid cell.

    ``mean`` may be an array of shape (M, 1) to produce M rows at once.
    """
    edges = _cell_edges(support)
    cdf = ndtr((edges - mean) / math.sqrt(variance))
    return np.diff(cdf, axis=-1)


def gaussian_motion_kernel(support: np.ndarray, A: float, Q: float) -> np.ndarray:
    """Row-stochastic kernel K[i, j] = p(h_t = x_j | h_{t-1} = x_i) for h_t = A h + N(0, Q).

    Mass that would leave the grid is folded back in by reflection about the
    outer cell edges.
    """
    if not Q > 0:
        raise ValueError("grid motion kernel needs Q > 0")
    edges = _cell_edges(support)
    lo, hi = edges[0], edges[-1]
    centers = (A * support)[:, None]
    s = math.sqrt(Q)
    cdf = lambda y: ndtr((y - centers) / s)
    k = np.diff(cdf(edges), axis=1)
    # cell [e_j, e_j+1] also receives the mirror images [2b - e_j+1, 2b - e_j] of both boundaries b
    k += cdf(2 * lo - edges[:-1]) - cdf(2 * lo - edges[1:])
    k += cdf(2 * hi - edges[:-1]) - cdf(2 * hi - edges[1:])
    return k / k.sum(axis=1, keepdims=True)


def bayes_step(belief: GridBelief, motion: np.ndarray, likelihood: np.ndarray) -> GridBelief:
    """Predict through ``motion`` then weight by ``likelihood`` and renormalise."""
    motion = np.asarray(motion, dtype=np.float64)
    n = belief.mass.size
    if motion.shape != (n, n):
        raise ValueError(f"motion kernel shape {motion.shape} does not match grid size {n}")
    if np.max(np.abs(motion.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError("motion kernel rows must sum to 1")
    likelihood = np.asarray(likelihood, dtype=np.float64)
    if likelihood.shape != (n,) or np.any(likelihood < 0):
        raise ValueError("likelihood must be a non-negative vector over the grid")
    predicted = belief.mass @ motion
    return GridBelief(belief.support, normalize(predicted * likelihood))


def gaussian_likelihood(support: np.ndarray, x: float, H: float, R: float) -> np.ndarray:
    return np.exp(-0.5 * (x - H * support) ** 2 / R)


@dataclass(frozen=True)
class KalmanTerms:
    predicted: GaussianBelief
    gain: float
    carry: float
    """Coefficient on the previous mean, (1 - K H) A."""
    posterior: GaussianBelief


def kalman_terms(belief: GaussianBelief, A: float, Q: float, H: float, R: float, x: float) -> KalmanTerms:
    if not R > 0:
        raise ValueError(f"observation variance R must be > 0, got {R}")
    if Q < 0:
        raise ValueError(f"process variance Q must be >= 0, got {Q}")
    m_pred = A * belief.mean
    p_pred = A * A * belief.variance + Q
    gain = p_pred * H / (H * H * p_pred + R)
    carry = (1.0 - gain * H) * A
    mean = carry * belief.mean + gain * x
    var = (1.0 - gain * H) * p_pred
    return KalmanTerms(GaussianBelief(m_pred, p_pred), gain, carry, GaussianBelief(mean, var))


def kalman_step(belief: GaussianBelief, A: float, Q: float, H: float, R: float, x: float) -> GaussianBelief:
    """Scalar Kalman predict/update."""
    return kalman_terms(belief, A, Q, H, R, x).posterior


def rnn_state_step(W_hh, W_xh, h, x) -> np.ndarray:
    W_hh, W_xh = np.atleast_2d(W_hh), np.atleast_2d(W_xh)
    h, x = np.atleast_1d(np.asarray(h, float)), np.atleast_1d(np.asarray(x, float))
    if W_hh.shape != (h.size, h.size) or W_xh.shape != (h.size, x.size):
        raise ValueError(f"shape mismatch: W_hh {W_hh.shape}, W_xh {W_xh.shape}, h {h.shape}, x {x.shape}")
    return np.tanh(W_hh @ h + W_xh @ x)


# -- pathway decompositions --------------------------------------------------

def rnn_pathways(W_hh, W_xh, h, x) -> tuple[np.ndarray, np.ndarray]:
    """(carry, admit) pre-activation terms: W_hh h and W_xh x."""
    W_hh, W_xh = np.atleast_2d(W_hh), np.atleast_2d(W_xh)
    return W_hh @ np.atleast_1d(h), W_xh @ np.atleast_1d(x)


def kalman_pathways(belief: GaussianBelief, A, Q, H, R, x) -> tuple[float, float]:
    t = kalman_terms(belief, A, Q, H, R, x)
    return t.carry * belief.mean, t.gain * x


def lstm_pathways(params: ParamSet, x: np.ndarray, state: LstmState, prefix: str = "lstm.") -> tuple[np.ndarray, np.ndarray]:
    """(f * c, i * g): the kept and admitted parts of the new cell state."""
    Wx, Wh, b = params[f"{prefix}Wx"], params[f"{prefix}Wh"], params[f"{prefix}b"]
    n = Wh.shape[0]
    z = np.asarray(x) @ Wx + state.h @ Wh + b
    sig = lambda v: 0.5 * (1.0 + np.tanh(0.5 * v))
    i, f, g = sig(z[:n]), sig(z[n:2 * n]), np.tanh(z[3 * n:])
    return f * state.c, i * g


# -- grid vs Kalman comparison -----------------------------------------------

@dataclass(frozen=True)
class LinearGaussianModel:
    A: float = 0.9
    Q: float = 1.0
    H: float = 1.0
    R: float = 1.0
    prior_mean: float = 0.0
    prior_var: float = 1.0

    def stationary_std(self) -> float:
        if abs(self.A) < 1:
            return math.sqrt(max(self.Q / (1 - self.A ** 2), self.prior_var))
        return math.sqrt(self.Q + self.prior_var)


def simulate_observations(model: LinearGaussianModel, steps: int, rng: np.random.Generator) -> np.ndarray:
    h = rng.normal(model.prior_mean, math.sqrt(model.prior_var))
    xs = []
    for _ in range(steps):
        h = model.A * h + rng.normal(0.0, math.sqrt(model.Q))
        xs.append(model.H * h + rng.normal(0.0, math.sqrt(model.R)))
    return np.array(xs)


COMPARE_COLUMNS = ("step", "kalman_mean", "kalman_var", "grid_mean", "grid_var", "l1_distance")


def compare_filters(model: LinearGaussianModel, observations: np.ndarray, n_grid: int,
                    half_range_sigmas: float = 10.0) -> list[dict]:
    """Run both filters over ``observations``; one row per step.

    ``l1_distance`` is the L1 distance between the grid histogram density and
    the Kalman posterior binned onto the same cells.
    """
    half = half_range_sigmas * model.stationary_std()
    support = np.linspace(model.prior_mean - half, model.prior_mean + half, n_grid)
    grid = GridBelief(support, normalize(gaussian_cell_mass(support, model.prior_mean, model.prior_var)))
    kal = GaussianBelief(model.prior_mean, model.prior_var)
    motion = gaussian_motion_kernel(support, model.A, model.Q)
    rows = []
    for t, x in enumerate(observations, 1):
        kal = kalman_step(kal, model.A, model.Q, model.H, model.R, float(x))
        grid = bayes_step(grid, motion, gaussian_likelihood(support, float(x), model.H, model.R))
        ref = gaussian_cell_mass(support, kal.mean, kal.variance)
        rows.append({
            "step": t,
            "kalman_mean": kal.mean,
            "kalman_var": kal.variance,
            "grid_mean": grid.mean(),
            "grid_var": grid.variance(),
            "l1_distance": float(np.abs(grid.mass - ref).sum()),
        })
    return rows


def write_comparison_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

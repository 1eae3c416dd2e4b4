"""Small reverse-mode engine for fixed MLP and LSTM topologies.

Everything is float64. Arrays are batched along the first axis; a 1-D input
is treated as a batch of one and the result squeezed back.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, TextIO

import numpy as np

CHECKPOINT_MAGIC = "lanerl-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


class ParamSet:
    """Named parameter tensors with matching gradient buffers."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"parameter {name!r} has non-finite values")
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def shape(self, name: str) -> tuple[int, ...]:
        return self.values[name].shape

    def num_values(self) -> int:
        return sum(v.size for v in self.values.values())

    def update(self, other: "ParamSet") -> None:
        for name in other:
            self.add(name, other[name])

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, v in self.values.items():
            out.values[name] = v.copy()
            out.grads[name] = self.grads[name].copy()
        return out

    def load_values(self, other: "ParamSet") -> None:
        for name, v in other.values.items():
            self.values[name][...] = v

    def check_finite(self) -> None:
        for name in self.values:
            if not np.all(np.isfinite(self.values[name])):
                raise NonFiniteError(f"parameter {name!r} has non-finite values")
            if not np.all(np.isfinite(self.grads[name])):
                raise NonFiniteError(f"gradient of {name!r} is non-finite")

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.values.items() if k.startswith(prefix)}


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


# -- MLP ---------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        if self.hidden_activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.hidden_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def require_hidden(self) -> None:
        if self.n_layers < 2:
            raise ValueError("this network needs at least one hidden layer")


def mlp_init(spec: MlpSpec, rng: np.random.Generator, prefix: str = "") -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    params = ParamSet()
    for i, (n_in, n_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        bound = 1.0 / math.sqrt(n_in)
        params.add(f"{prefix}W{i}", rng.uniform(-bound, bound, size=(n_in, n_out)))
        params.add(f"{prefix}b{i}", np.zeros(n_out))
    return params


@dataclass
class MlpCache:
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    squeeze: bool


def mlp_forward(spec: MlpSpec, params: ParamSet, x: np.ndarray, prefix: str = "") -> tuple[np.ndarray, MlpCache]:
    h, squeeze = _as_batch(x)
    if h.shape[1] != spec.n_in:
        raise ValueError(f"input has {h.shape[1]} features, network expects {spec.n_in}")
    inputs, outputs = [], []
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        inputs.append(h)
        z = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        h = np.tanh(z) if i < last and spec.hidden_activation == "tanh" else z
        outputs.append(h)
    out = h[0] if squeeze else h
    return out, MlpCache(inputs, outputs, squeeze)


def mlp_backward(spec: MlpSpec, params: ParamSet, cache: MlpCache | None, grad_output: np.ndarray,
                 prefix: str = "", accumulate: bool = True) -> np.ndarray:
    """Accumulate parameter gradients and return the gradient w.r.t. the input.

    With ``accumulate=False`` only the input gradient is computed.
    """
    if cache is None:
        raise ValueError("mlp_backward needs the cache from mlp_forward")
    g, _ = _as_batch(grad_output)
    last = spec.n_layers - 1
    for i in reversed(range(spec.n_layers)):
        if i < last and spec.hidden_activation == "tanh":
            g = g * (1.0 - cache.outputs[i] ** 2)
        if accumulate:
            params.grads[f"{prefix}W{i}"] += cache.inputs[i].T @ g
            params.grads[f"{prefix}b{i}"] += g.sum(axis=0)
        g = g @ params[f"{prefix}W{i}"].T
    return g[0] if cache.squeeze else g


class Mlp:
    """An MlpSpec bound to a ParamSet (possibly shared with other networks)."""

    def __init__(self, spec: MlpSpec, params: ParamSet, prefix: str = ""):
        self.spec = spec
        self.params = params
        self.prefix = prefix

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator, prefix: str = "") -> "Mlp":
        return cls(spec, mlp_init(spec, rng, prefix), prefix)

    def forward(self, x):
        return mlp_forward(self.spec, self.params, x, self.prefix)

    def backward(self, cache, grad_output, accumulate: bool = True):
        return mlp_backward(self.spec, self.params, cache, grad_output, self.prefix, accumulate)

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def first_layer_multiplies(self, n_inputs: int | None = None) -> int:
        """Multiplications spent by the first affine layer on ``n_inputs`` input features."""
        n = self.spec.n_in if n_inputs is None else n_inputs
        return n * self.spec.layer_sizes[1]


# -- LSTM --------------------------------------------------------------------

@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ValueError("h and c must have the same shape")

    @classmethod
    def zeros(cls, hidden_size: int, batch: int | None = None) -> "LstmState":
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(np.zeros(shape), np.zeros(shape))

    def copy(self) -> "LstmState":
        return LstmState(self.h.copy(), self.c.copy())


def lstm_init(input_size: int, hidden_size: int, rng: np.random.Generator, prefix: str = "lstm.") -> ParamSet:
    """Gate blocks are ordered input, forget, output, candidate; forget bias starts at +1."""
    params = ParamSet()
    bound = 1.0 / math.sqrt(input_size + hidden_size)
    params.add(f"{prefix}Wx", rng.uniform(-bound, bound, size=(input_size, 4 * hidden_size)))
    params.add(f"{prefix}Wh", rng.uniform(-bound, bound, size=(hidden_size, 4 * hidden_size)))
    b = np.zeros(4 * hidden_size)
    b[hidden_size:2 * hidden_size] = 1.0
    params.add(f"{prefix}b", b)
    return params


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LstmCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    tanh_c: np.ndarray
    squeeze: bool


def lstm_step(params: ParamSet, x: np.ndarray, state: LstmState, prefix: str = "lstm.",
              return_cache: bool = False):
    """c' = f*c + i*g, h' = o*tanh(c')."""
    xb, squeeze = _as_batch(x)
    h, _ = _as_batch(state.h)
    c, _ = _as_batch(state.c)
    Wx, Wh, b = params[f"{prefix}Wx"], params[f"{prefix}Wh"], params[f"{prefix}b"]
    if xb.shape[1] != Wx.shape[0]:
        raise ValueError(f"input has {xb.shape[1]} features, LSTM expects {Wx.shape[0]}")
    if h.shape[1] != Wh.shape[0] or h.shape[0] != xb.shape[0]:
        raise ValueError("LSTM state shape does not match parameters or batch")
    return _lstm_from_z(xb @ Wx + h @ Wh + b, xb, h, c, squeeze, return_cache)


def _lstm_from_z(z, xb, h, c, squeeze, return_cache):
    n = h.shape[1]
    gates = _sigmoid(z[:, :3 * n])
    i, f, o = gates[:, :n], gates[:, n:2 * n], gates[:, 2 * n:]
    g = np.tanh(z[:, 3 * n:])
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    new_state = LstmState(h_new[0], c_new[0]) if squeeze else LstmState(h_new, c_new)
    if not return_cache:
        return new_state
    return new_state, LstmCache(xb, h, c, i, f, o, g, tanh_c, squeeze)


def lstm_gate_grads(cache: LstmCache, dh: np.ndarray, dc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. the gate pre-activations z of one step, and dc_prev (batched inputs)."""
    dc = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    dz = np.concatenate([
        dc * cache.g * cache.i * (1.0 - cache.i),
        dc * cache.c_prev * cache.f * (1.0 - cache.f),
        dh * cache.tanh_c * cache.o * (1.0 - cache.o),
        dc * cache.i * (1.0 - cache.g ** 2),
    ], axis=1)
    return dz, dc * cache.f


def lstm_step_backward(params: ParamSet, cache: LstmCache, dh: np.ndarray, dc: np.ndarray,
                       prefix: str = "lstm.") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward through one step; returns (dx, dh_prev, dc_prev)."""
    dh, _ = _as_batch(dh)
    dc, _ = _as_batch(dc)
    dz, dc_prev = lstm_gate_grads(cache, dh, dc)
    Wx, Wh = params[f"{prefix}Wx"], params[f"{prefix}Wh"]
    params.grads[f"{prefix}Wx"] += cache.x.T @ dz
    params.grads[f"{prefix}Wh"] += cache.h_prev.T @ dz
    params.grads[f"{prefix}b"] += dz.sum(axis=0)
    dx = dz @ Wx.T
    dh_prev = dz @ Wh.T
    if cache.squeeze:
        return dx[0], dh_prev[0], dc_prev[0]
    return dx, dh_prev, dc_prev


def lstm_hidden_size(params: ParamSet, prefix: str = "lstm.") -> int:
    return params.shape(f"{prefix}Wh")[0]


# -- optimisation and checking ----------------------------------------------

def sgd_step(params: ParamSet, learning_rate: float, names: Iterable[str] | None = None) -> ParamSet:
    """values -= lr * grad, then zero the gradients. Refuses to apply non-finite gradients."""
    names = list(params) if names is None else list(names)
    for name in names:
        if not np.all(np.isfinite(params.grads[name])):
            raise NonFiniteError(f"gradient of {name!r} is non-finite")
    for name in names:
        if learning_rate != 0.0:
            params.values[name] -= learning_rate * params.grads[name]
        params.grads[name].fill(0.0)
    return params


def clip_grad_norm(params: ParamSet, max_norm: float, names: Iterable[str] | None = None) -> float:
    names = list(params) if names is None else list(names)
    total = math.sqrt(sum(float(np.sum(params.grads[n] ** 2)) for n in names))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for n in names:
            params.grads[n] *= scale
    return total


def grad_check(loss_and_grad: Callable[[ParamSet], float], params: ParamSet, epsilon: float = 1e-5,
               names: Iterable[str] | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_and_grad(params)`` must return the scalar loss and accumulate its
    gradient into ``params.grads``. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    names = list(params) if names is None else list(names)
    params.zero_grad()
    loss_and_grad(params)
    analytic = {n: params.grads[n].copy() for n in names}
    worst = 0.0
    for n in names:
        value = params.values[n]
        flat = value.reshape(-1)
        a_flat = analytic[n].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            params.zero_grad()
            up = float(loss_and_grad(params))
            flat[j] = orig - epsilon
            params.zero_grad()
            down = float(loss_and_grad(params))
            flat[j] = orig
            numeric = (up - down) / (2 * epsilon)
            a = float(a_flat[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    params.zero_grad()
    return worst


# -- text checkpoint container -------------------------------------------------

def write_container(fh: TextIO, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Versioned text container; floats are written with 17 significant digits."""
    fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
    fh.write("meta " + json.dumps(meta, sort_keys=True) + "\n")
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if " " in name:
            raise ValueError(f"tensor name {name!r} contains a space")
        fh.write(" ".join(["tensor", name, str(arr.ndim), *(str(d) for d in arr.shape)]) + "\n")
        fh.write(" ".join(format(float(v), ".17g") for v in arr.reshape(-1)) + "\n")
    fh.write("end\n")


class CheckpointFormatError(ValueError):
    pass


def read_container(fh: TextIO) -> tuple[dict, dict[str, np.ndarray]]:
    header = fh.readline().split()
    if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a lanerl checkpoint")
    if int(header[1]) != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"checkpoint version {header[1]} unsupported (expected {CHECKPOINT_VERSION})")
    line = fh.readline()
    if not line.startswith("meta "):
        raise CheckpointFormatError("missing meta line")
    meta = json.loads(line[5:])
    tensors: dict[str, np.ndarray] = {}
    while True:
        line = fh.readline()
        if not line:
            raise CheckpointFormatError("truncated checkpoint")
        line = line.strip()
        if line == "end":
            break
        parts = line.split()
        if parts[0] != "tensor":
            raise CheckpointFormatError(f"unexpected line {line[:40]!r}")
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(d) for d in parts[3:3 + ndim])
        data = fh.readline().split()
        arr = np.array([float(v) for v in data], dtype=np.float64)
        if arr.size != int(np.prod(shape)):
            raise CheckpointFormatError(f"tensor {name} has {arr.size} values for shape {shape}")
        tensors[name] = arr.reshape(shape)
    return meta, tensors

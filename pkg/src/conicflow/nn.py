"""Dense velocity network with hand-written reverse-mode gradients.

The network maps ``(x, t)`` to a velocity in the same space as ``x``. Time is
fed through a sinusoidal embedding that is concatenated to ``x`` before the
first layer. Hidden layers use SiLU; the output layer is linear.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .exceptions import ConfigError, NumericalError

CHECKPOINT_MAGIC = b"CFLOW1"
_ACTIVATIONS = ("silu", "tanh")


def time_embedding(t, n_frequencies):
    """Sinusoidal features of ``t``; returns shape ``(B, 2 * n_frequencies)``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    if n_frequencies == 0:
        return np.zeros((t.shape[0], 0))
    freqs = np.exp(np.linspace(0.0, np.log(100.0), n_frequencies))
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _activate(kind, z):
    """Returns ``(activation, derivative)``."""
    if kind == "silu":
        s = expit(z)
        return z * s, s * (1.0 + z * (1.0 - s))
    a = np.tanh(z)
    return a, 1.0 - a * a


@dataclass
class VelocityField:
    """Parameters of an MLP approximating ``v(x, t)``.

    ``weights[i]`` has shape ``(fan_out, fan_in)``; a layer computes
    ``h @ W.T + b``.
    """

    input_dim: int
    hidden_dims: tuple
    n_frequencies: int
    weights: list = field(repr=False)
    biases: list = field(repr=False)
    activation: str = "silu"

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        dims = self.layer_dims()
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ConfigError("number of parameter arrays does not match layer spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ConfigError(f"layer {i} has shapes {w.shape}, {b.shape}; "
                                  f"expected {(dims[i + 1], dims[i])}")

    @classmethod
    def init(cls, input_dim, hidden_dims=(128, 128, 128), n_frequencies=16,
             activation="silu", seed=0):
        """Fan-in scaled uniform initialisation, deterministic in ``seed``."""
        rng = np.random.default_rng(seed)
        dims = _layer_dims(input_dim, hidden_dims, n_frequencies)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(input_dim, tuple(hidden_dims), n_frequencies, weights, biases, activation)

    @classmethod
    def zeros(cls, input_dim, hidden_dims=(128, 128, 128), n_frequencies=16, activation="silu"):
        dims = _layer_dims(input_dim, hidden_dims, n_frequencies)
        weights = [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(o) for o in dims[1:]]
        return cls(input_dim, tuple(hidden_dims), n_frequencies, weights, biases, activation)

    def layer_dims(self):
        return _layer_dims(self.input_dim, self.hidden_dims, self.n_frequencies)

    @property
    def params(self):
        """Parameters interleaved as ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_params(self, params, copy=True):
        """A new field with the same architecture and the given parameters."""
        if copy:
            params = [np.array(p, dtype=np.float64) for p in params]
        return VelocityField(self.input_dim, self.hidden_dims, self.n_frequencies,
                             params[0::2], params[1::2], self.activation)

    def copy(self):
        return self.with_params(self.params)

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def __call__(self, x, t):
        return forward(self, x, t)


def _layer_dims(input_dim, hidden_dims, n_frequencies):
    if input_dim < 1 or n_frequencies < 0 or any(h < 1 for h in hidden_dims):
        raise ConfigError("dimensions must be positive")
    return [input_dim + 2 * n_frequencies, *hidden_dims, input_dim]


def _prepare(field, x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != field.input_dim:
        raise ConfigError(f"expected points of dimension {field.input_dim}, got shape {x.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    return x, t, single


def _run(field, x, t, keep):
    h = np.concatenate([x, time_embedding(t, field.n_frequencies)], axis=1)
    inputs, slopes = [], []
    last = len(field.weights) - 1
    for i, (w, b) in enumerate(zip(field.weights, field.biases)):
        z = h @ w.T + b
        if keep:
            inputs.append(h)
            if not np.all(np.isfinite(z)):
                raise NumericalError(f"non-finite activation in layer {i}", layer=i)
        if i == last:
            h = z
        elif keep:
            h, slope = _activate(field.activation, z)
            slopes.append(slope)
        else:
            h = z * expit(z) if field.activation == "silu" else np.tanh(z)
    return h, (inputs, slopes)


def forward(field, x, t):
    """Evaluate ``v(x, t)`` for one point ``(d,)`` or a batch ``(B, d)``."""
    x, t, single = _prepare(field, x, t)
    out, _ = _run(field, x, t, keep=False)
    return out[0] if single else out


def forward_cached(field, x, t):
    """Batch forward pass that also returns the cache :func:`backward` can reuse."""
    x, t, _ = _prepare(field, x, t)
    return _run(field, x, t, keep=True)


def backward(field, x, t, upstream, cache=None):
    """Gradient of ``sum_i <upstream_i, v(x_i, t_i)>`` w.r.t. all parameters.

    Returns arrays in the order of ``field.params``. ``cache`` from
    :func:`forward_cached` on the same inputs skips the forward pass.
    """
    x, t, _ = _prepare(field, x, t)
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if x.shape[0] == 0:
        raise ConfigError("empty batch")
    if upstream.shape != (x.shape[0], field.input_dim):
        raise ConfigError(f"upstream shape {upstream.shape} does not match output "
                          f"{(x.shape[0], field.input_dim)}")
    if cache is None:
        _, cache = _run(field, x, t, keep=True)
    inputs, slopes = cache
    grads = [None] * (2 * len(field.weights))
    delta = upstream
    for i in range(len(field.weights) - 1, -1, -1):
        grads[2 * i] = delta.T @ inputs[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ field.weights[i]) * slopes[i - 1]
    return grads


@dataclass
class OptimState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, learning_rate, beta1, beta2, eps)


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns ``(new_params, state)``.

    A non-finite gradient raises before anything is modified.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ConfigError("params, grads and optimiser state differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.first_moment[i].shape:
            raise ConfigError(f"shape mismatch at parameter {i}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {i}; update rejected",
                                 layer=i // 2)
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    new_params = []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        new_params.append(p - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return new_params, state


@dataclass
class EmaShadow:
    shadow_params: list
    decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ConfigError(f"EMA decay must lie in [0, 1), got {self.decay}")
        self.shadow_params = [np.array(p, dtype=np.float64) for p in self.shadow_params]

    def update(self, params):
        if len(params) != len(self.shadow_params):
            raise ConfigError("parameter count mismatch")
        for s, p in zip(self.shadow_params, params):
            if s.shape != p.shape:
                raise ConfigError("parameter shape mismatch")
            s *= self.decay
            s += (1.0 - self.decay) * p
        return self


def ema_update(shadow, params):
    return shadow.update(params)


def save_checkpoint(field, path, **meta):
    """Write ``field`` to ``path``; extra keyword metadata goes into the header."""
    header = {
        "input_dim": field.input_dim,
        "hidden_dims": list(field.hidden_dims),
        "n_frequencies": field.n_frequencies,
        "activation": field.activation,
        "n_params": field.n_params,
        **meta,
    }
    flat = np.concatenate([p.ravel(order="C") for p in field.params]).astype("<f8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns ``(field, header)``."""
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint (magic {magic!r})")
        header = json.loads(fh.readline())
        (count,) = struct.unpack("<Q", fh.read(8))
        flat = np.frombuffer(fh.read(), dtype="<f8")
    if flat.size != count or count != header["n_params"]:
        raise ConfigError(f"{path}: truncated parameter block")
    template = VelocityField.zeros(header["input_dim"], header["hidden_dims"],
                                   header["n_frequencies"], header["activation"])
    params, offset = [], 0
    for p in template.params:
        params.append(flat[offset:offset + p.size].reshape(p.shape).astype(np.float64))
        offset += p.size
    return template.with_params(params), header

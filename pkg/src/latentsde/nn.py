"""Dense networks with hand-written reverse mode, Adam and LR decay.

Layers are ``a_{l+1} = act(W_l a_l + b_l)`` with ``W_l`` of shape (out, in);
the last layer uses ``output_activation`` (identity by default).  Inputs may
be a single vector or a batch of row vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend, _rng
from .errors import InvalidInputError, TrainingDivergedError
from .lsde_io import read_array, read_json, write_array, write_json

ACTIVATIONS = ("softplus", "leaky_relu", "tanh", "identity")
LEAKY_SLOPE = 0.01


def _act(name, x):
    if name == "softplus":
        return np.logaddexp(0.0, x)
    if name == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    if name == "tanh":
        return np.tanh(x)
    return x


def _act_grad(name, x, y):
    """Derivative at pre-activation x (y = act(x) is passed to save work)."""
    if name == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * x))  # logistic, overflow-free
    if name == "leaky_relu":
        return np.where(x > 0, 1.0, LEAKY_SLOPE)
    if name == "tanh":
        return 1.0 - y * y
    return np.ones_like(x)


@dataclass
class Mlp:
    layer_widths: list
    activation: str
    weights: list
    biases: list
    seed: int = 0
    output_activation: str = "identity"

    def __post_init__(self):
        for a in (self.activation, self.output_activation):
            if a not in ACTIVATIONS:
                raise InvalidInputError(f"unknown activation {a!r}")
        if len(self.weights) != len(self.layer_widths) - 1:
            raise InvalidInputError("need one weight matrix per layer")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise InvalidInputError(f"expected {self.n_params} parameters, got {vec.size}")
        off = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = vec[off:off + w.size].reshape(w.shape).copy()
            off += w.size
            self.biases[i] = vec[off:off + b.size].copy()
            off += b.size

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_widths), self.activation, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.seed, self.output_activation)

    def header(self) -> dict:
        return {"layer_widths": list(map(int, self.layer_widths)), "activation": self.activation,
                "output_activation": self.output_activation, "seed": int(self.seed)}


def init_mlp(widths, activation: str, seed: int, init: str = "auto", gain: float | None = None,
             output_activation: str = "identity") -> Mlp:
    """Seeded initialisation.

    ``init='kaiming'``: N(0, gain^2/fan_in) with the leaky-ReLU gain.
    ``init='xavier'``: N(0, gain^2 * 2/(fan_in+fan_out)).
    ``auto`` picks kaiming for leaky_relu, xavier otherwise.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise InvalidInputError("need at least input and output widths, all positive")
    if init == "auto":
        init = "kaiming" if activation == "leaky_relu" else "xavier"
    key = _rng.stream_key(seed, "init")
    weights, biases, off = [], [], 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        z = _backend.normals(key, off, fan_in * fan_out).reshape(fan_out, fan_in)
        off += fan_in * fan_out
        if init == "kaiming":
            g = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2)) if gain is None else gain
            std = g / np.sqrt(fan_in)
        elif init == "xavier":
            g = 1.0 if gain is None else gain
            std = g * np.sqrt(2.0 / (fan_in + fan_out))
        elif init == "zeros":
            std = 0.0
        else:
            raise InvalidInputError(f"unknown init {init!r}")
        weights.append(std * z)
        biases.append(np.zeros(fan_out))
    return Mlp(widths, activation, weights, biases, seed, output_activation)


def _check_input(mlp: Mlp, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != mlp.layer_widths[0]:
        raise InvalidInputError(f"input width {x.shape[-1] if x.ndim else 0} != {mlp.layer_widths[0]}")
    return x


def forward_cached(mlp: Mlp, x):
    """Forward pass returning (output, cache) for :func:`backward_cached`."""
    x = _check_input(mlp, x)
    acts, pres = [x], []
    a = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        pre = a @ w.T + b
        a = _act(mlp.output_activation if i == last else mlp.activation, pre)
        pres.append(pre)
        acts.append(a)
    return a, (acts, pres)


def forward(mlp: Mlp, x) -> np.ndarray:
    return forward_cached(mlp, x)[0]


def backward_cached(mlp: Mlp, cache, upstream):
    """Gradients of sum(upstream * output); returns (input_grad, [(dW, db), ...])."""
    acts, pres = cache
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise InvalidInputError(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
    grads = [None] * len(mlp.weights)
    last = len(mlp.weights) - 1
    for i in range(last, -1, -1):
        name = mlp.output_activation if i == last else mlp.activation
        if name != "identity":
            g = g * _act_grad(name, pres[i], acts[i + 1])
        a_in = acts[i]
        if g.ndim == 1:
            dW, db = np.outer(g, a_in), g.copy()
        else:
            dW = g.reshape(-1, g.shape[-1]).T @ a_in.reshape(-1, a_in.shape[-1])
            db = g.reshape(-1, g.shape[-1]).sum(axis=0)
        grads[i] = (dW, db)
        g = g @ mlp.weights[i]
    return g, grads


def backward(mlp: Mlp, x, upstream):
    """Recomputes the forward pass, then back-propagates ``upstream``."""
    _, cache = forward_cached(mlp, x)
    return backward_cached(mlp, cache, upstream)


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])


def save_mlp(mlp: Mlp, stem) -> None:
    """Write ``stem.json`` (header) and ``stem.bin`` (flat parameters)."""
    stem = Path(stem)
    write_json(stem.with_suffix(".json"), mlp.header())
    write_array(stem.with_suffix(".bin"), mlp.get_flat())


def load_mlp(stem) -> Mlp:
    stem = Path(stem)
    h = read_json(stem.with_suffix(".json"))
    mlp = init_mlp(h["layer_widths"], h["activation"], h["seed"], init="zeros",
                   output_activation=h.get("output_activation", "identity"))
    mlp.set_flat(read_array(stem.with_suffix(".bin")).ravel())
    return mlp


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    shapes: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 1.0
    epoch: int = 0
    step: int = 0
    m: list = field(default=None, repr=False)
    v: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = [np.zeros(s) for s in self.shapes]
            self.v = [np.zeros(s) for s in self.shapes]

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls([np.shape(p) for p in params], **kw)

    @property
    def current_lr(self) -> float:
        return self.lr * self.decay ** self.epoch

    def end_epoch(self) -> None:
        self.epoch += 1


def adam_step(state: AdamState, params, grads):
    """Bias-corrected Adam at lr * decay**epoch; returns new params list."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise InvalidInputError("params/grads do not match the optimiser state")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(p) != m.shape or np.shape(g) != m.shape:
            raise InvalidInputError("parameter and gradient shapes must match the moments")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient", term="gradient", epoch=state.epoch)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    lr = state.current_lr
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append(p - lr * mhat / (np.sqrt(vhat) + state.eps))
    return out

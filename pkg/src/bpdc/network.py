"""Dense "multiplexer" network mapping binary codes to the probability simplex.

The network is ``softmax(W_L act(... act(W_0 z + b_0) ...) + b_L)``. Inputs may
be a single code of shape ``(K,)`` or a batch ``(B, K)``; gradients from a
batched backward pass are summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, StateError
from .mathcore import Rng, softmax

ACTIVATIONS = ("tanh", "relu", "sigmoid")


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return 1.0 / (1.0 + np.exp(-a))


def _act_grad(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    # derivative of the activation, expressed through pre-activation a and output h
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (a > 0.0).astype(np.float64)
    return h * (1.0 - h)


@dataclass
class ForwardCache:
    """Per-call activations kept for :meth:`MultiplexerNet.backward`."""

    owner: int
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    output: np.ndarray
    batched: bool


@dataclass
class MultiplexerNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input width {w.shape[1]} != previous output")

    @classmethod
    def initialize(cls, dims, rng: Rng, activation: str = "tanh") -> MultiplexerNet:
        """Weights ~ N(0, 1/fan_in), zero biases."""
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ShapeError(f"invalid layer dims {dims}")
        weights = [rng.normal((dout, din)) / np.sqrt(din) for din, dout in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(dout) for dout in dims[1:]]
        return cls(weights, biases, activation)

    @classmethod
    def zeros(cls, dims, activation: str = "tanh") -> MultiplexerNet:
        return cls([np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])], [np.zeros(o) for o in dims[1:]], activation)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in the order W_0, b_0, W_1, b_1, ... (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> MultiplexerNet:
        return MultiplexerNet([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def _check_input(self, z) -> tuple[np.ndarray, bool]:
        z = np.asarray(z, dtype=np.float64)
        batched = z.ndim == 2
        zb = z if batched else z[None, :]
        if zb.ndim != 2 or zb.shape[1] != self.n_in:
            raise ShapeError(f"code has shape {z.shape}, network expects length {self.n_in}")
        return zb, batched

    def forward(self, z) -> np.ndarray:
        return self.forward_with_cache(z)[0]

    def forward_with_cache(self, z) -> tuple[np.ndarray, ForwardCache]:
        h, batched = self._check_input(z)
        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = h @ w.T + b
            pre.append(a)
            h = softmax(a, axis=1) if i == last else _act(self.activation, a)
        out = h if batched else h[0]
        return out, ForwardCache(id(self), inputs, pre, h, batched)

    def backward(self, cache: ForwardCache | None, grad_out) -> list[np.ndarray]:
        """Gradients of a scalar objective w.r.t. ``params()`` given d obj / d output."""
        if cache is None or cache.owner != id(self):
            raise StateError("backward needs the cache from forward_with_cache on this network")
        g = np.asarray(grad_out, dtype=np.float64)
        g = g if cache.batched else g[None, :]
        if g.shape != cache.output.shape:
            raise ShapeError(f"grad_out shape {g.shape} does not match output {cache.output.shape}")
        y = cache.output
        # softmax Jacobian-vector product
        delta = y * (g - np.sum(g * y, axis=1, keepdims=True))
        grads: list[np.ndarray] = []
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append(delta.sum(axis=0))
            grads.append(delta.T @ cache.inputs[i])
            if i:
                h = cache.inputs[i]
                delta = (delta @ self.weights[i]) * _act_grad(self.activation, cache.pre[i - 1], h)
        grads.reverse()
        return grads


@dataclass
class AdamState:
    """ADAM moment accumulators for a list of parameter arrays."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    stepsize: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, params, stepsize: float = 1e-3, **kw) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], stepsize, **kw)

    def copy(self) -> AdamState:
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v],
                         self.stepsize, self.beta1, self.beta2, self.eps, self.t)


def adam_step(params, grads, state: AdamState, diagnostic: str = ""):
    """One bias-corrected ADAM descent step, applied in place to ``params``.

    Returns ``(params, state)``. To maximize an objective pass its negated gradient.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and ADAM moments have different lengths")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in ADAM step{': ' + diagnostic if diagnostic else ''}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.stepsize * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state

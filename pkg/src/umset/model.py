"""Sigmoid-headed MLP scorer with a frozen transition layer, exact
reverse-mode gradients and Adam.

Everything operates on batches: ``x`` has shape (n, d_x) and the network
output ``f`` has shape (n,).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .transition import TransitionCoefficients, transition_derivative, transition_matrix

log = logging.getLogger(__name__)

PARAMS_FORMAT = "umset-mlp"
PARAMS_VERSION = 1
G_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


@dataclass
class NetworkParams:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError("layer %d: weight %s and bias %s do not compose" % (i, w.shape, b.shape))
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError("layer %d input width %d != previous output %d"
                                 % (i, w.shape[0], self.weights[i - 1].shape[1]))
        if self.weights[-1].shape[1] != 1:
            raise ShapeError("output width must be 1")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list:
        """Weights and biases interleaved, layer by layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_dict(self) -> dict:
        return {
            "format": PARAMS_FORMAT,
            "version": PARAMS_VERSION,
            "widths": self.widths,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkParams":
        if doc.get("format") != PARAMS_FORMAT or doc.get("version") != PARAMS_VERSION:
            raise ValueError("not a %s v%d document" % (PARAMS_FORMAT, PARAMS_VERSION))
        widths = doc["widths"]
        weights = [np.array(w, dtype=float).reshape(i, o)
                   for w, i, o in zip(doc["weights"], widths[:-1], widths[1:])]
        biases = [np.array(b, dtype=float) for b in doc["biases"]]
        return cls(weights, biases)


def init_params(widths: Sequence[int], rng: np.random.Generator) -> NetworkParams:
    """He-style uniform init, bound sqrt(6 / fan_in); zero biases."""
    if len(widths) < 2 or widths[-1] != 1:
        raise ShapeError("widths must run from input to a single output, got %r" % (widths,))
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases)


def save_params(params: NetworkParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh)


def load_params(path) -> NetworkParams:
    with open(path) as fh:
        return NetworkParams.from_dict(json.load(fh))


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    z = np.asarray(z, dtype=float)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list
    post: list
    logit: np.ndarray
    f: np.ndarray
    g: Optional[np.ndarray] = None


def _as_batch(params: NetworkParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ShapeError("input of shape %s does not match input width %d"
                         % (x.shape, params.weights[0].shape[0]))
    return x


def forward(params: NetworkParams, x) -> ForwardTrace:
    h = _as_batch(params, x)
    inputs = h
    pre, post = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w + b
        pre.append(a)
        if i < last:
            h = np.maximum(a, 0.0)
            post.append(h)
    logit = pre[-1][:, 0]
    return ForwardTrace(inputs, pre, post, logit, sigmoid(logit))


def surrogate_forward(params: NetworkParams, coeffs: TransitionCoefficients, x) -> ForwardTrace:
    trace = forward(params, x)
    trace.g = transition_matrix(coeffs, trace.f)
    return trace


def surrogate_loss(trace: ForwardTrace, ybar, reduce: bool = True):
    """Cross-entropy -log g_ybar(x) of the surrogate set classifier.

    ``ybar`` holds 0-based set indices. g is floored at 1e-12 inside the log.
    """
    ybar = np.asarray(ybar, dtype=int).reshape(-1)
    g_y = trace.g[np.arange(len(ybar)), ybar]
    if np.any(g_y < 1e-300):
        log.warning("surrogate posterior underflow on %d examples; clamped", int(np.sum(g_y < 1e-300)))
    losses = -np.log(np.maximum(g_y, G_FLOOR))
    return float(np.mean(losses)) if reduce else losses


def backprop(params: NetworkParams, trace: ForwardTrace, dlogit: np.ndarray) -> NetworkParams:
    """Pull d(loss)/d(logit) back through the network; returns a gradient
    structure shaped like ``params``."""
    n_layers = len(params.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    delta = np.asarray(dlogit, dtype=float).reshape(-1, 1)
    for i in range(n_layers - 1, -1, -1):
        h_in = trace.post[i - 1] if i else trace.inputs
        grad_w[i] = h_in.T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ params.weights[i].T) * (trace.pre[i - 1] > 0)
    return NetworkParams(grad_w, grad_b)


def add_weight_decay(params: NetworkParams, grads: NetworkParams, weight_decay: float) -> float:
    """Add the l2 penalty (weight_decay/2)*sum ||W||^2 to grads in place; returns the penalty."""
    if not weight_decay:
        return 0.0
    penalty = 0.0
    for w, gw in zip(params.weights, grads.weights):
        gw += weight_decay * w
        penalty += 0.5 * weight_decay * float(np.sum(w * w))
    return penalty


def surrogate_dlogit(trace: ForwardTrace, coeffs: TransitionCoefficients, ybar) -> np.ndarray:
    """d(mean cross-entropy)/d(logit) for each example of the batch."""
    ybar = np.asarray(ybar, dtype=int).reshape(-1)
    rows = np.arange(len(ybar))
    g_y = trace.g[rows, ybar]
    dT = transition_derivative(coeffs, trace.f)[rows, ybar]
    dsig = trace.f * (1.0 - trace.f)
    dlogit = np.where(g_y > G_FLOOR, -dT / np.maximum(g_y, G_FLOOR), 0.0) * dsig
    return dlogit / len(ybar)


def backward(params: NetworkParams, coeffs: TransitionCoefficients, x, ybar,
             weight_decay: float = 0.0) -> tuple[float, NetworkParams]:
    """Mean surrogate cross-entropy over the batch and its exact gradient."""
    ybar = np.asarray(ybar, dtype=int).reshape(-1)
    if len(ybar) == 0:
        raise ShapeError("empty batch")
    trace = surrogate_forward(params, coeffs, x)
    if len(ybar) != len(trace.f):
        raise ShapeError("%d inputs but %d surrogate labels" % (len(trace.f), len(ybar)))
    loss = surrogate_loss(trace, ybar)
    grads = backprop(params, trace, surrogate_dlogit(trace, coeffs, ybar))
    loss += add_weight_decay(params, grads, weight_decay)
    check_finite(loss, grads)
    return loss, grads


def check_finite(loss: float, grads: NetworkParams) -> None:
    if not np.isfinite(loss) or any(not np.all(np.isfinite(a)) for a in grads.arrays()):
        raise NumericalError("non-finite loss or gradient (loss=%r)" % loss)


@dataclass
class OptimizerState:
    first_moment: list
    second_moment: list
    learning_rate: float = 1e-3
    decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, params: NetworkParams, **kwargs) -> "OptimizerState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kwargs)

    def effective_lr(self, epoch: int) -> float:
        return self.learning_rate / (1.0 + self.decay * epoch)


def adam_step(params: NetworkParams, state: OptimizerState, grads: NetworkParams,
              epoch: int = 0) -> tuple[NetworkParams, OptimizerState]:
    """One bias-corrected Adam update, in place; returns (params, state)."""
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if [a.shape for a in p_arrays] != [a.shape for a in g_arrays]:
        raise ShapeError("gradient shapes do not match parameters")
    state.step_count += 1
    t = state.step_count
    lr = state.effective_lr(epoch)
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for p, g, m, v in zip(p_arrays, g_arrays, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon_hat)
    return params, state


class SurrogateObjective:
    """Mean surrogate cross-entropy of a batch as a function of the logits."""

    def __init__(self, coeffs: TransitionCoefficients):
        self.coeffs = coeffs

    def __call__(self, logit: np.ndarray, ybar: np.ndarray) -> tuple[float, np.ndarray]:
        f = sigmoid(logit)
        trace = ForwardTrace(None, [], [], logit, f, transition_matrix(self.coeffs, f))
        return surrogate_loss(trace, ybar), surrogate_dlogit(trace, self.coeffs, ybar)


def predict(params: NetworkParams, x) -> np.ndarray:
    """+1 where f(x) >= 1/2, else -1."""
    return np.where(forward(params, x).f >= 0.5, 1, -1)

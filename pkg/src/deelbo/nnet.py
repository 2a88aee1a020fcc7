"""Small tanh MLP backbone with a linear softmax head.

The backbone maps ``P`` inputs through ``hidden_sizes`` to ``repr_dim``
features. Its last output unit is overwritten with the constant 1 after the
final activation so the head ``V`` (shape ``C x H``) carries the intercept.
Backbone weights live in one flat vector ``w``: for each layer, the
``fan_in x fan_out`` weight matrix (row-major) followed by its bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from deelbo.errors import NumericalError, ShapeError


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_sizes: tuple = ()
    repr_dim: int = 2
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_dim < 1:
            raise ShapeError("input_dim must be >= 1")
        if self.repr_dim < 2:
            raise ShapeError("repr_dim must be >= 2 (one slot is the constant feature)")
        if self.num_classes < 2:
            raise ShapeError("num_classes must be >= 2")
        if any(h < 1 for h in self.hidden_sizes):
            raise ShapeError("hidden sizes must be positive")

    @property
    def layer_sizes(self):
        return (self.input_dim, *self.hidden_sizes, self.repr_dim)

    @property
    def layer_shapes(self):
        sizes = self.layer_sizes
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def D(self):
        return sum(fi * fo + fo for fi, fo in self.layer_shapes)

    @property
    def head_shape(self):
        return (self.num_classes, self.repr_dim)

    @property
    def head_dim(self):
        return self.num_classes * self.repr_dim


@dataclass
class FlatParams:
    w: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)

    def to_vector(self):
        return np.concatenate([self.w, self.V.ravel()])

    @classmethod
    def from_vector(cls, spec, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (spec.D + spec.head_dim,):
            raise ShapeError(f"expected vector of length {spec.D + spec.head_dim}, got {vec.shape}")
        return cls(vec[: spec.D].copy(), vec[spec.D :].reshape(spec.head_shape).copy())

    def copy(self):
        return FlatParams(self.w.copy(), self.V.copy())

    def __add__(self, other):
        return FlatParams(self.w + other.w, self.V + other.V)

    def __mul__(self, scalar):
        return FlatParams(self.w * scalar, self.V * scalar)

    __rmul__ = __mul__


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)


def zeros(spec):
    return FlatParams(np.zeros(spec.D), np.zeros(spec.head_shape))


def init_params(spec, rng):
    """Glorot-uniform backbone weights, zero biases, zero head."""
    chunks = []
    for fan_in, fan_out in spec.layer_shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return FlatParams(np.concatenate(chunks), np.zeros(spec.head_shape))


def unflatten_backbone(spec, w):
    """Split flat ``w`` into a list of ``(W, b)`` views."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.D,):
        raise ShapeError(f"backbone vector must have length {spec.D}, got {w.shape}")
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes:
        W = w[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = w[offset : offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def _check_inputs(spec, params, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"X must have shape (B, {spec.input_dim}), got {X.shape}")
    if params.V.shape != spec.head_shape:
        raise ShapeError(f"V must have shape {spec.head_shape}, got {params.V.shape}")
    return X


def _forward_cache(spec, params, X):
    X = _check_inputs(spec, params, X)
    activations = [X]
    h = X
    for W, b in unflatten_backbone(spec, params.w):
        h = np.tanh(h @ W + b)
        activations.append(h)
    z = activations[-1].copy()
    z[:, -1] = 1.0
    logits = z @ params.V.T
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits in forward pass")
    return activations, z, logits


def representations(spec, params, X):
    """Backbone features ``z`` (B x H) with the constant last column."""
    return _forward_cache(spec, params, X)[1]


def logits(spec, params, X):
    return _forward_cache(spec, params, X)[2]


def forward(spec, params, X):
    """Class probabilities, shape (B, C)."""
    return softmax(logits(spec, params, X), axis=1)


def _check_labels(spec, y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {y.shape}")
    if n and (y.min() < 0 or y.max() >= spec.num_classes):
        raise ShapeError(f"labels must lie in [0, {spec.num_classes})")
    return y.astype(np.int64)


def log_likelihood(spec, params, batch):
    """Sum over the batch of ``log p(y_i | w, V)``."""
    lg = logits(spec, params, batch.X)
    y = _check_labels(spec, batch.y, lg.shape[0])
    return float(np.sum(log_softmax(lg, axis=1)[np.arange(len(y)), y]))


def log_likelihood_and_grad(spec, params, batch):
    """Log likelihood and its gradient as a :class:`FlatParams`."""
    activations, z, lg = _forward_cache(spec, params, batch.X)
    y = _check_labels(spec, batch.y, lg.shape[0])
    logp = log_softmax(lg, axis=1)
    rows = np.arange(len(y))
    value = float(np.sum(logp[rows, y]))

    d_logits = -np.exp(logp)
    d_logits[rows, y] += 1.0
    grad_V = d_logits.T @ z
    d_h = d_logits @ params.V
    d_h[:, -1] = 0.0  # constant feature

    layer_grads = []
    layers = unflatten_backbone(spec, params.w)
    for i in range(len(layers) - 1, -1, -1):
        W = layers[i][0]
        h_prev, h = activations[i], activations[i + 1]
        d_pre = d_h * (1.0 - h * h)
        layer_grads.append(((h_prev.T @ d_pre).ravel(), d_pre.sum(axis=0)))
        d_h = d_pre @ W.T
    grad_w = np.concatenate([g for pair in reversed(layer_grads) for g in pair])
    return value, FlatParams(grad_w, grad_V)


def grad_log_likelihood(spec, params, batch):
    return log_likelihood_and_grad(spec, params, batch)[1]


def predictive_probs(spec, param_samples, X):
    """Average class probabilities over a sequence of parameter samples."""
    total = None
    count = 0
    for p in param_samples:
        probs = forward(spec, p, X)
        total = probs if total is None else total + probs
        count += 1
    if count == 0:
        raise ValueError("need at least one parameter sample")
    return total / count


def accuracy_and_nll(probs, y):
    """Accuracy and mean negative log-likelihood of predictive probabilities."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        return float("nan"), float("nan")
    acc = float(np.mean(np.argmax(probs, axis=1) == y))
    picked = np.clip(probs[np.arange(len(y)), y], 1e-300, None)
    return acc, float(-np.mean(np.log(picked)))

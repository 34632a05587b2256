"""A small dense-tensor neural-network engine (NHWC, numpy).

Only what the classifier needs: same-padded stride-1 convolution, 2x2 max
pooling, flatten, fully connected layers, ReLU/softmax, sparse categorical
cross-entropy and Adam.  Layers are stateless: ``forward`` returns the output
together with a cache, and ``backward`` consumes that cache, so one parameter
set can serve concurrent inference calls.

Arrays are float32 by default.  Passing float64 parameters and inputs runs the
whole stack in float64, which the gradient checks rely on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .errors import DataError, NumericFault, ShapeError, UsageError

PROB_FLOOR = 1e-12


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite values in {what}")
    return arr


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Gradient of relu at ``x``; the subgradient at 0 is 0."""
    return grad * (x > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sparse_cce(probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean ``-log p[label]`` and its gradient with respect to the logits.

    ``probs`` must come from :func:`softmax`; the returned gradient is that of
    the fused softmax + cross-entropy, ``(p - onehot) / batch``.
    """
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    batch, classes = probs.shape
    if labels.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"labels must lie in [0, {classes})")
    check_finite(probs, "probabilities")
    rows = np.arange(batch)
    picked = np.clip(probs[rows, labels], PROB_FLOOR, 1.0)
    loss = float(-np.mean(np.log(picked)))
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= batch
    return loss, grad


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

@dataclass
class ConvCache:
    cols: np.ndarray
    weights: np.ndarray
    input_shape: tuple
    single: bool


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ShapeError(f"expected a rank {rank - 1} or {rank} tensor, got shape {x.shape}")
    return x, False


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, ConvCache]:
    """Stride-1, zero "same" padding.  ``x`` is ``[H,W,Cin]`` or ``[N,H,W,Cin]``."""
    x, single = _batched(x, 4)
    n, h, w, cin = x.shape
    if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
        raise ShapeError(f"weights must be [k,k,Cin,Cout], got {weights.shape}")
    k, _, wcin, cout = weights.shape
    if wcin != cin:
        raise ShapeError(f"input has {cin} channels, weights expect {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    if k == 1:
        cols = x.reshape(n * h * w, cin)
    else:
        before = k // 2
        xp = np.pad(x, ((0, 0), (before, k - 1 - before), (before, k - 1 - before), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n,h,w,cin,k,k
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * cin)
    out = cols @ weights.reshape(k * k * cin, cout) + bias
    out = out.reshape(n, h, w, cout)
    cache = ConvCache(cols, weights, x.shape, single)
    return (out[0] if single else out), cache


def conv2d_backward(grad: np.ndarray, cache: Optional[ConvCache]):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    if cache is None:
        raise UsageError("conv2d_backward needs the cache from conv2d_forward")
    n, h, w, cin = cache.input_shape
    k, _, _, cout = cache.weights.shape
    g2 = grad.reshape(-1, cout)
    if g2.shape[0] != n * h * w:
        raise ShapeError(f"gradient shape {grad.shape} does not match forward output")
    wmat = cache.weights.reshape(k * k * cin, cout)
    grad_w = (cache.cols.T @ g2).reshape(cache.weights.shape)
    grad_b = g2.sum(axis=0)
    gcols = g2 @ wmat.T
    if k == 1:
        grad_x = gcols.reshape(n, h, w, cin)
    else:
        grad_x = kernels.col2im(gcols.reshape(n, h, w, k, k, cin), k, k // 2)
    return (grad_x[0] if cache.single else grad_x), grad_w, grad_b


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

@dataclass
class PoolCache:
    argmax: np.ndarray
    single: bool


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, PoolCache]:
    """2x2 window, stride 2.  Ties go to the first winner in row-major order."""
    x, single = _batched(x, 4)
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {x.shape[1:3]}")
    out, idx = kernels.maxpool2_forward(np.ascontiguousarray(x))
    return (out[0] if single else out), PoolCache(idx, single)


def maxpool2_backward(grad: np.ndarray, cache: Optional[PoolCache]) -> np.ndarray:
    if cache is None:
        raise UsageError("maxpool2_backward needs the cache from maxpool2_forward")
    g = grad[None] if cache.single else grad
    if g.shape != cache.argmax.shape:
        raise UsageError(f"gradient shape {grad.shape} does not match the pooling cache")
    out = kernels.maxpool2_backward(np.ascontiguousarray(g), cache.argmax)
    return out[0] if cache.single else out


# --------------------------------------------------------------------------
# dense
# --------------------------------------------------------------------------

def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    x, single = _batched(x, 2)
    if weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"input width {x.shape[1]} does not match weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias must have shape ({weights.shape[1]},), got {bias.shape}")
    out = x @ weights + bias
    return (out[0] if single else out), (x, weights, single)


def dense_backward(grad: np.ndarray, cache):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    if cache is None:
        raise UsageError("dense_backward needs the cache from dense_forward")
    x, weights, single = cache
    g = np.atleast_2d(grad)
    if g.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"gradient shape {grad.shape} does not match forward output")
    gx = g @ weights.T
    return (gx[0] if single else gx), x.T @ g, g.sum(axis=0)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------
# Each layer is an immutable description; parameters live outside it as a
# list of arrays.  Shapes below exclude the batch axis.

_CONV_ACTS = ("relu", "none")
_DENSE_ACTS = ("relu", "softmax", "none")


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_size: int = 1
    activation: str = "relu"
    kind = "Conv2D"

    def __post_init__(self):
        if self.activation not in _CONV_ACTS:
            raise ValueError(f"Conv2D activation must be one of {_CONV_ACTS}")

    def param_shapes(self):
        k = self.kernel_size
        return [(k, k, self.in_channels, self.out_channels), (self.out_channels,)]

    def output_shape(self, shape):
        h, w, c = shape
        if c != self.in_channels:
            raise ShapeError(f"Conv2D expects {self.in_channels} channels, got {c}")
        return (h, w, self.out_channels)

    def init_params(self, rng, dtype=np.float32):
        k = self.kernel_size
        w = glorot_uniform(rng, self.param_shapes()[0], k * k * self.in_channels,
                           k * k * self.out_channels, dtype)
        return [w, np.zeros(self.out_channels, dtype)]

    def forward(self, params, x):
        z, conv_cache = conv2d_forward(x, params[0], params[1])
        if self.activation == "relu":
            return relu(z), (conv_cache, z)
        return z, (conv_cache, None)

    def backward(self, params, cache, grad):
        if cache is None:
            raise UsageError("Conv2D.backward called without a forward cache")
        conv_cache, z = cache
        if z is not None:
            grad = relu_backward(grad, z)
        gx, gw, gb = conv2d_backward(grad, conv_cache)
        return gx, [gw, gb]


@dataclass(frozen=True)
class MaxPool2:
    kind = "MaxPool2"

    def param_shapes(self):
        return []

    def output_shape(self, shape):
        h, w, c = shape
        if h % 2 or w % 2:
            raise ShapeError(f"max pooling needs even spatial dims, got {(h, w)}")
        return (h // 2, w // 2, c)

    def init_params(self, rng, dtype=np.float32):
        return []

    def forward(self, params, x):
        return maxpool2_forward(x)

    def backward(self, params, cache, grad):
        return maxpool2_backward(grad, cache), []


@dataclass(frozen=True)
class Flatten:
    kind = "Flatten"

    def param_shapes(self):
        return []

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def init_params(self, rng, dtype=np.float32):
        return []

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, grad):
        if cache is None:
            raise UsageError("Flatten.backward called without a forward cache")
        return grad.reshape(cache), []


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    activation: str = "relu"
    kind = "Dense"

    def __post_init__(self):
        if self.activation not in _DENSE_ACTS:
            raise ValueError(f"Dense activation must be one of {_DENSE_ACTS}")

    def param_shapes(self):
        return [(self.in_features, self.out_features), (self.out_features,)]

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(f"Dense expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def init_params(self, rng, dtype=np.float32):
        w = glorot_uniform(rng, self.param_shapes()[0], self.in_features, self.out_features, dtype)
        return [w, np.zeros(self.out_features, dtype)]

    def forward(self, params, x):
        z, dense_cache = dense_forward(x, params[0], params[1])
        if self.activation == "relu":
            return relu(z), (dense_cache, z)
        if self.activation == "softmax":
            return softmax(z), (dense_cache, None)
        return z, (dense_cache, None)

    def backward(self, params, cache, grad):
        # for a softmax head, ``grad`` is already with respect to the logits
        # (see sparse_cce), so it passes straight through
        if cache is None:
            raise UsageError("Dense.backward called without a forward cache")
        dense_cache, z = cache
        if self.activation == "relu":
            grad = relu_backward(grad, z)
        gx, gw, gb = dense_backward(grad, dense_cache)
        return gx, [gw, gb]


def param_count(layer) -> int:
    return sum(int(np.prod(s)) for s in layer.param_shapes())


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params, **hyper: Any) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params: list, grads: list, state: AdamState):
    """One bias-corrected Adam update, in place.  Returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter {p.shape}, gradient {g.shape}, moment {m.shape} disagree")
    for i, g in enumerate(grads):
        check_finite(g, f"gradient {i}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        denom = np.sqrt(v / c2)
        denom += state.epsilon
        p -= state.lr * (m / c1) / denom
    return params, state

"""Dense kernels: activations, layer normalization and tensor initialization.

Everything here works on float64 numpy arrays and broadcasts over leading
axes, so the same function serves a single vector and a whole batch.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_LN_EPS = 1e-12


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


def as_vector(values, length=None, name="vector"):
    """Convert to a finite float64 array, optionally checking the last axis length."""
    arr = np.asarray(values, dtype=np.float64)
    if length is not None and (arr.ndim == 0 or arr.shape[-1] != length):
        raise ShapeError(f"{name}: expected last dimension {length}, got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(arr, name="tensor"):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")


def activate(x, kind):
    """Apply ``kind`` elementwise; returns ``(y, derivative_mask)``.

    The ReLU derivative at exactly zero is taken as 0.
    """
    kind = ActivationKind(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is ActivationKind.RELU:
        mask = (x > 0).astype(np.float64)
        return x * mask, mask
    return x.copy(), np.ones_like(x)


@dataclass
class LayerNormParams:
    gain: np.ndarray
    bias: np.ndarray
    eps: float = DEFAULT_LN_EPS

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.gain.shape != self.bias.shape:
            raise ShapeError(f"gain {self.gain.shape} and bias {self.bias.shape} differ")
        if not self.eps > 0:
            raise ValueError("layer norm epsilon must be positive")

    @classmethod
    def identity(cls, size, eps=DEFAULT_LN_EPS):
        return cls(np.ones(size), np.zeros(size), eps)


@dataclass
class LayerNormCache:
    x_shape: tuple
    mean: np.ndarray
    std: np.ndarray
    x_hat: np.ndarray
    gain_shape: tuple


def layer_norm_forward(x, params):
    """Normalize over the last axis, then scale by gain and shift by bias.

    ``std`` is the population standard deviation with ``eps`` added to the
    variance, so constant inputs map to ``bias``.
    """
    x = np.asarray(x, dtype=np.float64)
    H = params.gain.shape[-1]
    if x.ndim == 0 or x.shape[-1] != H:
        raise ShapeError(f"layer norm expects last dimension {H}, got {x.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    std = np.sqrt(var + params.eps)
    x_hat = centered / std
    h = params.gain * x_hat + params.bias
    return h, LayerNormCache(x.shape, mean, std, x_hat, params.gain.shape)


def layer_norm_backward(grad_h, cache, params):
    """Gradients of ``layer_norm_forward`` w.r.t. input, gain and bias.

    Gain/bias gradients are summed over the leading axes that were broadcast.
    """
    grad_h = np.asarray(grad_h, dtype=np.float64)
    if grad_h.shape != cache.x_shape or params.gain.shape != cache.gain_shape:
        raise ContractError("layer norm cache does not match this gradient / parameter set")
    grad_b = _reduce_to(grad_h, params.bias.shape)
    grad_g = _reduce_to(grad_h * cache.x_hat, params.gain.shape)
    g_hat = grad_h * params.gain
    mean_term = g_hat.mean(axis=-1, keepdims=True)
    proj_term = np.mean(g_hat * cache.x_hat, axis=-1, keepdims=True)
    grad_x = (g_hat - mean_term - cache.x_hat * proj_term) / cache.std
    return grad_x, grad_g, grad_b


def _reduce_to(arr, shape):
    lead = arr.ndim - len(shape)
    out = arr.sum(axis=tuple(range(lead))) if lead > 0 else arr
    for axis, size in enumerate(shape):
        if size == 1 and out.shape[axis] != 1:
            out = out.sum(axis=axis, keepdims=True)
    return out


def init_tensor(shape, scheme="zeros", seed=None, sigma=0.01, rng=None):
    """Allocate a float64 tensor.

    ``scheme`` is one of ``zeros``, ``ones``, ``normal`` (std ``sigma``) or
    ``uniform-glorot``. For glorot the last two axes are (fan_out, fan_in),
    matching a weight matrix applied as ``W @ x``.
    """
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"invalid shape {shape}")
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "ones":
        return np.ones(shape)
    if rng is None:
        rng = np.random.default_rng(seed)
    if scheme == "normal":
        return rng.normal(0.0, sigma, size=shape)
    if scheme == "uniform-glorot":
        if len(shape) < 2:
            raise ShapeError("glorot initialization needs a matrix shape")
        fan_out, fan_in = shape[-2], shape[-1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    raise ValueError(f"unknown init scheme {scheme!r}")


def sigmoid(z):
    """Overflow-free logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)

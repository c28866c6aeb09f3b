"""Per-field feature generation networks and the sum / product merges.

The stack kernels are vectorized over fields, generators and batch: inputs
are laid out as (fields, generators or 1, batch, width) so every layer is a
single broadcast matmul against weights of shape (fields, generators, out, in).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .numerics import LayerNormParams, activate, layer_norm_backward, layer_norm_forward


@dataclass
class StackCache:
    inputs: list
    pre: list
    masks: list


def stack_forward(X, Ws, bs, activation):
    h = X
    inputs, pre, masks = [], [], []
    for W, b in zip(Ws, bs):
        inputs.append(h)
        z = np.matmul(h, np.swapaxes(W, -1, -2)) + b[..., None, :]
        h, mask = activate(z, activation)
        pre.append(z)
        masks.append(mask)
    return h, StackCache(inputs, pre, masks)


def stack_backward(grad_out, cache, Ws):
    """Returns ``(grad_X, grad_Ws, grad_bs)``; ``grad_X`` is summed back to the input's shape."""
    grad_Ws = [None] * len(Ws)
    grad_bs = [None] * len(Ws)
    g = grad_out
    for l in range(len(Ws) - 1, -1, -1):
        dz = g * cache.masks[l]
        h_in = cache.inputs[l]
        grad_Ws[l] = np.matmul(np.swapaxes(dz, -1, -2), h_in)
        grad_bs[l] = dz.sum(axis=-2)
        g = np.matmul(dz, Ws[l])
    X = cache.inputs[0]
    if g.shape != X.shape:
        g = g.sum(axis=1, keepdims=True)
    return g, grad_Ws, grad_bs


@dataclass
class FGNetCache:
    field_index: int
    generator_index: int
    lead_shape: tuple
    stack: StackCache


def _one_stack(params, field_index, generator_index):
    sl = (slice(field_index, field_index + 1), slice(generator_index, generator_index + 1))
    return [W[sl] for W in params.fg_W], [b[sl] for b in params.fg_b]


def fgnet_forward(v, field_index, generator_index, params, config):
    """Generate one feature vector from embedding(s) ``v`` of shape (..., d)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape[-1] != config.d:
        raise ShapeError(f"fgnet input must have last dimension {config.d}, got {v.shape}")
    if not 0 <= generator_index < config.u:
        raise ShapeError(f"generator index {generator_index} outside 0..{config.u - 1}")
    Ws, bs = _one_stack(params, field_index, generator_index)
    X = v.reshape(1, 1, -1, config.d)
    out, cache = stack_forward(X, Ws, bs, config.fgnet_activation)
    return out.reshape(v.shape), FGNetCache(field_index, generator_index, v.shape, cache)


def fgnet_backward(grad_g, cache, field_index, generator_index, params):
    """Backprop one generator; returns ``(grad_v, [grad_W per layer], [grad_b per layer])``."""
    grad_g = np.asarray(grad_g, dtype=np.float64)
    if (cache.field_index, cache.generator_index) != (field_index, generator_index) or grad_g.shape != cache.lead_shape:
        raise ContractError("fgnet cache was produced for a different generator or input")
    Ws, _ = _one_stack(params, field_index, generator_index)
    d = cache.lead_shape[-1]
    gX, gWs, gbs = stack_backward(grad_g.reshape(1, 1, -1, d), cache.stack, Ws)
    return gX.reshape(cache.lead_shape), [g[0, 0] for g in gWs], [g[0, 0] for g in gbs]


def generate_all(E, params, config):
    """Run every field's generators on a batch of embeddings.

    ``E`` has shape (B, f, d); the result has shape (B, f, u, d).
    """
    X = np.transpose(E, (1, 0, 2))[:, None]
    out, cache = stack_forward(X, params.fg_W, params.fg_b, config.fgnet_activation)
    return np.transpose(out, (2, 0, 1, 3)), cache


def generate_all_backward(grad_G, cache, params):
    """Inverse layout of ``generate_all``: returns ``(grad_E, grad_Ws, grad_bs)``."""
    g = np.transpose(grad_G, (1, 2, 0, 3))
    gX, gWs, gbs = stack_backward(g, cache, params.fg_W)
    return np.transpose(gX[:, 0], (1, 0, 2)), gWs, gbs


@dataclass
class GeneratedFeatureSet:
    """An original embedding with its ``u`` generated vectors.

    ``origin`` is (..., d) and ``generated`` is (..., u, d).
    """

    origin: np.ndarray
    generated: np.ndarray
    field_index: int | None = None
    caches: list = field(default_factory=list)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.generated = np.asarray(self.generated, dtype=np.float64)
        if self.generated.shape[:-2] != self.origin.shape[:-1] or self.generated.shape[-1] != self.origin.shape[-1]:
            raise ShapeError(f"generated {self.generated.shape} does not match origin {self.origin.shape}")

    @property
    def u(self):
        return self.generated.shape[-2]


@dataclass
class MergedFeature:
    vector: np.ndarray
    strategy: str
    cache: object = None


@dataclass
class _ProductCache:
    origin_shape: tuple
    ln_params: LayerNormParams
    ln_cache: object


def merge_sum(fs: GeneratedFeatureSet):
    return MergedFeature(fs.origin + fs.generated.sum(axis=-2), "sum", fs.origin.shape)


def merge_product(fs: GeneratedFeatureSet, ln: LayerNormParams):
    """Layer-normalized elementwise product of the origin and its single generated vector."""
    if fs.u != 1:
        raise ConfigError(f"product merge needs exactly one generated feature, got {fs.u}")
    prod = fs.generated[..., 0, :] * fs.origin
    h, ln_cache = layer_norm_forward(prod, ln)
    return MergedFeature(h, "product", _ProductCache(fs.origin.shape, ln, ln_cache))


def merge_backward(grad_merged, merged: MergedFeature, fs: GeneratedFeatureSet):
    """Returns ``(grad_origin, grad_generated, ln_grads)``; ``ln_grads`` is
    ``(grad_gain, grad_bias)`` for the product merge and ``None`` for sum."""
    grad_merged = np.asarray(grad_merged, dtype=np.float64)
    if merged.strategy == "sum":
        if merged.cache != fs.origin.shape or grad_merged.shape != fs.origin.shape:
            raise ContractError("sum-merge cache does not match this feature set")
        grad_gen = np.broadcast_to(grad_merged[..., None, :], fs.generated.shape).copy()
        return grad_merged.copy(), grad_gen, None
    if merged.strategy == "product":
        cache = merged.cache
        if cache.origin_shape != fs.origin.shape or grad_merged.shape != fs.origin.shape:
            raise ContractError("product-merge cache does not match this feature set")
        grad_prod, grad_gain, grad_bias = layer_norm_backward(grad_merged, cache.ln_cache, cache.ln_params)
        g = fs.generated[..., 0, :]
        grad_origin = grad_prod * g
        grad_gen = (grad_prod * fs.origin)[..., None, :]
        return grad_origin, grad_gen, (grad_gain, grad_bias)
    raise ContractError(f"unknown merge strategy {merged.strategy!r}")

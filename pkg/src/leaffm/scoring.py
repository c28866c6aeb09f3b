"""Model scores for FM, FFM and the three Leaf-FM variants.

``forward`` is the batched engine used by training and evaluation; the
per-instance ``score_*`` functions wrap it and return a ``ScoreBreakdown``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import as_table
from .errors import ConfigError, FeatureLookupError
from .fgnet import GeneratedFeatureSet, generate_all, merge_product, merge_sum
from .numerics import LayerNormParams, sigmoid
from .params import Variant


def _pairs_to_arrays(active):
    active = list(active)
    if not active:
        return np.zeros((0, 0)), np.zeros(0)
    vecs = np.array([np.asarray(v, dtype=np.float64) for v, _ in active])
    vals = np.array([float(x) for _, x in active])
    return vecs, vals


def fm_interaction_fast(vectors, values=None):
    """Sum over unordered pairs of ``<a_i, a_j>`` with ``a_i = x_i * v_i``.

    Uses ``0.5 * (||sum a||^2 - sum ||a||^2)``. ``vectors`` is (..., n, d)
    and ``values`` (..., n); alternatively pass a list of ``(vector, value)``
    pairs as the only argument.
    """
    if values is None and not isinstance(vectors, np.ndarray):
        vectors, values = _pairs_to_arrays(vectors)
    a = np.asarray(vectors, dtype=np.float64)
    if values is not None:
        a = a * np.asarray(values, dtype=np.float64)[..., None]
    if a.shape[-2] == 0:
        return np.zeros(a.shape[:-2]) if a.ndim > 2 else 0.0
    s = a.sum(axis=-2)
    out = 0.5 * (np.einsum("...d,...d->...", s, s) - np.einsum("...nd,...nd->...", a, a))
    return out if out.ndim else float(out)


def fm_interaction_bruteforce(vectors, values=None):
    """Literal double loop over pairs; O(n^2 d). Reference for testing."""
    if values is None and not isinstance(vectors, np.ndarray):
        vectors, values = _pairs_to_arrays(vectors)
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    values = np.ones(n) if values is None else np.asarray(values, dtype=np.float64)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            dot = 0.0
            for k in range(vectors.shape[1]):
                dot += vectors[i, k] * vectors[j, k]
            total += dot * values[i] * values[j]
    return total


def fm_interaction_pairwise(vectors):
    """Vectorized explicit pair sum over (..., n, d): upper triangle of the Gram matrix.

    No squared-norm cancellation, so it is the better-conditioned reference.
    """
    a = np.asarray(vectors, dtype=np.float64)
    n = a.shape[-2]
    gram = np.einsum("...id,...jd->...ij", a, a)
    iu = np.triu_indices(n, k=1)
    return gram[..., iu[0], iu[1]].sum(axis=-1)


@dataclass
class ScoreBreakdown:
    bias: float
    linear: float
    interaction: float
    logit: float
    probability: float
    cache: object = None


@dataclass
class BatchScores:
    bias: float
    linear: np.ndarray
    interaction: np.ndarray
    logit: np.ndarray

    @property
    def probability(self):
        return sigmoid(self.logit)


@dataclass
class ForwardCache:
    variant: Variant
    rows: np.ndarray
    x: np.ndarray
    mask: np.ndarray
    E: np.ndarray
    active: np.ndarray = None      # (B, n, d) vectors entering the interaction
    G: np.ndarray = None
    gen_cache: object = None
    feature_set: GeneratedFeatureSet = None
    merged: object = None
    ffm_pair: tuple = None


def resolve_rows(table, config):
    """Global embedding rows, values and presence mask for a packed table."""
    feats = table.features
    if feats.shape[1] != config.f:
        raise FeatureLookupError(f"instances have {feats.shape[1]} fields, model expects {config.f}")
    vocab = np.asarray(config.per_field_vocab)
    mask = feats >= 0
    bad = mask & (feats >= vocab)
    if bad.any():
        r, k = np.argwhere(bad)[0]
        raise FeatureLookupError(f"instance {r}: feature {feats[r, k]} out of range for field {k} (vocab {vocab[k]})")
    rows = np.where(mask, feats + config.field_offsets, 0)
    x = np.where(mask, table.values, 0.0)
    return rows, x, mask


@lru_cache(maxsize=None)
def ffm_pair_index(f):
    """For all k < l: (k, l, slot of l in k's embeddings, slot of k in l's)."""
    K, L = np.triu_indices(f, k=1)
    return K, L, L - 1, K


def forward(table, params, config, pairwise=False):
    """Score a packed table; returns ``(BatchScores, ForwardCache)``.

    ``pairwise=True`` evaluates the interaction with an explicit pair sum
    instead of the sum-of-squares identity (used by gradient checking).
    """
    rows, x, mask = resolve_rows(table, config)
    variant = config.variant
    linear = np.einsum("bf,bf->b", params.w[rows], x)
    cache = ForwardCache(variant, rows, x, mask, params.V[rows])
    E = cache.E
    if variant is Variant.FFM:
        K, L, slot_k, slot_l = ffm_pair_index(config.f)
        A = E[:, K, slot_k]
        Bv = E[:, L, slot_l]
        xx = x[:, K] * x[:, L]
        interaction = np.einsum("bpd,bpd,bp->b", A, Bv, xx)
        cache.ffm_pair = (A, Bv, xx)
    else:
        if variant is Variant.FM:
            merged = E
        elif variant is Variant.LA_FM:
            G, cache.gen_cache = generate_all(E, params, config)
            cache.G = G
            merged = np.concatenate([E[:, :, None, :], G], axis=2)
        else:
            G, cache.gen_cache = generate_all(E, params, config)
            cache.G = G
            fs = GeneratedFeatureSet(E, G)
            cache.feature_set = fs
            if variant is Variant.LS_FM:
                cache.merged = merge_sum(fs)
            else:
                cache.merged = merge_product(fs, LayerNormParams(params.ln_gain, params.ln_bias))
            merged = cache.merged.vector
        if merged.ndim == 4:
            active = merged * x[:, :, None, None]
            active = active.reshape(len(x), -1, config.d)
        else:
            active = merged * x[:, :, None]
        cache.active = active
        interaction = fm_interaction_pairwise(active) if pairwise else fm_interaction_fast(active)
        if np.ndim(interaction) == 0:
            interaction = np.full(len(x), interaction)
    logit = params.w0[0] + linear + interaction
    return BatchScores(float(params.w0[0]), linear, interaction, logit), cache


def predict_logits(table, params, config, chunk=8192):
    out = np.empty(len(table))
    for start in range(0, len(table), chunk):
        part = table.take(slice(start, start + chunk))
        out[start:start + chunk] = forward(part, params, config)[0].logit
    return out


def _breakdown(instance, params, config):
    scores, cache = forward(as_table(instance, config.f), params, config)
    logit = float(scores.logit[0])
    return ScoreBreakdown(scores.bias, float(scores.linear[0]), float(scores.interaction[0]),
                          logit, float(sigmoid(logit)), cache)


def score_fm(instance, params, config):
    if config.variant is not Variant.FM:
        raise ConfigError(f"score_fm called with variant {config.variant.value}")
    return _breakdown(instance, params, config)


def score_ffm(instance, params, config):
    if config.variant is not Variant.FFM:
        raise ConfigError(f"score_ffm called with variant {config.variant.value}")
    return _breakdown(instance, params, config)


def score_leaf(instance, params, config):
    if not config.variant.is_leaf:
        raise ConfigError(f"score_leaf called with variant {config.variant.value}")
    return _breakdown(instance, params, config)


def score(instance, params, config):
    return _breakdown(instance, params, config)

"""Model configuration, trainable tensors, L2 penalty and lazy sparse Adam."""
from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import ActivationKind, init_tensor


class Variant(str, enum.Enum):
    FM = "fm"
    FFM = "ffm"
    LA_FM = "la_fm"
    LS_FM = "ls_fm"
    LP_FM = "lp_fm"

    @property
    def is_leaf(self):
        return self in (Variant.LA_FM, Variant.LS_FM, Variant.LP_FM)


SPARSE_TENSORS = ("w", "V")


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.FM
    per_field_vocab: tuple = (1,)
    d: int = 10
    r: int = 1
    p: int = 2
    u: int = 1
    activation: ActivationKind = ActivationKind.RELU
    l2: float = 1e-6
    learning_rate: float = 1e-4
    batch_size: int = 1024
    epochs: int = 50
    patience: int = 2
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init_sigma: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "activation", ActivationKind(self.activation))
        object.__setattr__(self, "per_field_vocab", tuple(int(v) for v in self.per_field_vocab))
        self.validate()

    def validate(self):
        if self.d < 1 or self.r < 1:
            raise ConfigError("d and r must be >= 1")
        if self.p < 2:
            raise ConfigError("FGNet depth p must be >= 2")
        if self.u < 0:
            raise ConfigError("u must be >= 0")
        if self.variant is Variant.LP_FM and self.u != 1:
            raise ConfigError("lp_fm generates exactly one feature per original (u = 1)")
        if self.l2 < 0:
            raise ConfigError("regularization weight must be >= 0")
        if not self.per_field_vocab or min(self.per_field_vocab) < 1:
            raise ConfigError("every field needs a vocabulary of at least 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    @property
    def f(self):
        return len(self.per_field_vocab)

    @property
    def m(self):
        return sum(self.per_field_vocab)

    @property
    def field_offsets(self):
        return np.concatenate([[0], np.cumsum(self.per_field_vocab)[:-1]]).astype(np.int64)

    @property
    def fgnet_activation(self):
        if self.variant is Variant.LS_FM:
            return ActivationKind.RELU
        if self.variant is Variant.LP_FM:
            return ActivationKind.IDENTITY
        return self.activation

    def layer_shapes(self):
        """(out, in) shape of each FGNet layer: d -> rd -> ... -> rd -> d."""
        rd = self.r * self.d
        widths = [self.d] + [rd] * (self.p - 1) + [self.d]
        return [(widths[i + 1], widths[i]) for i in range(self.p)]

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        out = {}
        for fld in fields(self):
            val = getattr(self, fld.name)
            out[fld.name] = val.value if isinstance(val, enum.Enum) else (list(val) if isinstance(val, tuple) else val)
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class ParameterSet:
    """All trainable tensors.

    FGNet layer ``l`` is stored for every field and generator at once:
    ``fg_W[l]`` has shape (f, u, out, in) and ``fg_b[l]`` (f, u, out).
    FFM keeps ``V`` as (m, f-1, d); slot ``s`` of a feature in field ``k``
    pairs with field ``s`` if ``s < k`` else ``s + 1``.
    """

    w0: np.ndarray
    w: np.ndarray
    V: np.ndarray
    fg_W: list = field(default_factory=list)
    fg_b: list = field(default_factory=list)
    ln_gain: np.ndarray | None = None
    ln_bias: np.ndarray | None = None

    def named_tensors(self):
        yield "w0", self.w0
        yield "w", self.w
        yield "V", self.V
        for l, (W, b) in enumerate(zip(self.fg_W, self.fg_b)):
            yield f"fg_W.{l}", W
            yield f"fg_b.{l}", b
        if self.ln_gain is not None:
            yield "ln_gain", self.ln_gain
            yield "ln_bias", self.ln_bias

    def tensor(self, name):
        if "." in name:
            attr, idx = name.split(".")
            return getattr(self, attr)[int(idx)]
        return getattr(self, name)

    def fgnet_layers(self, field_index, generator_index):
        """Views ``[(W, b), ...]`` of one generator's stack."""
        return [(W[field_index, generator_index], b[field_index, generator_index])
                for W, b in zip(self.fg_W, self.fg_b)]

    def copy(self):
        return copy.deepcopy(self)

    def is_finite(self):
        return all(np.all(np.isfinite(t)) for _, t in self.named_tensors())


def build_parameters(config: ModelConfig, seed=None):
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    m, f, d = config.m, config.f, config.d
    if config.variant is Variant.FFM:
        if f < 2:
            raise ConfigError("ffm needs at least two fields")
        V = init_tensor((m, f - 1, d), "normal", sigma=config.init_sigma, rng=rng)
    else:
        V = init_tensor((m, d), "normal", sigma=config.init_sigma, rng=rng)
    params = ParameterSet(np.zeros(1), np.zeros(m), V)
    if config.variant.is_leaf:
        for out_dim, in_dim in config.layer_shapes():
            params.fg_W.append(init_tensor((f, config.u, out_dim, in_dim), "uniform-glorot", rng=rng))
            params.fg_b.append(np.zeros((f, config.u, out_dim)))
    if config.variant is Variant.LP_FM:
        params.ln_gain = np.ones((f, d))
        params.ln_bias = np.zeros((f, d))
    return params


@dataclass(frozen=True)
class ParameterAudit:
    variant: str
    formula_count: int
    true_count: int

    def __str__(self):
        return f"variant={self.variant}\tformula_count={self.formula_count}\ttrue_count={self.true_count}"


def formula_count(config: ModelConfig):
    """Scalar count using the complexity-table formulas (bias terms ignored).

    For depth ``p`` and ``u`` generators the FGNet term generalizes to
    ``f * u * sum(out * in)`` over the weight matrices; with p=2, u=1 that
    is ``f * 2 * (rd * d)``.
    """
    m, f, d = config.m, config.f, config.d
    if config.variant is Variant.FM:
        return m + m * d
    if config.variant is Variant.FFM:
        return m + m * (f - 1) * d
    weights = sum(o * i for o, i in config.layer_shapes())
    return m + m * d + f * config.u * weights


def audit(params: ParameterSet, config: ModelConfig):
    true_count = sum(int(t.size) for _, t in params.named_tensors())
    return ParameterAudit(config.variant.value, formula_count(config), true_count)


def l2_penalty(params: ParameterSet, lam, rows=None):
    """``lam * sum(theta**2)`` over every trainable scalar except ``w0``.

    With ``rows`` given, the sparse tensors (``w``, ``V``) only contribute
    those rows. Returns ``(penalty, grads)`` where ``grads`` maps tensor name
    to ``2 * lam * theta`` (row-restricted for the sparse tensors).
    """
    if lam < 0:
        raise ValueError("regularization weight must be >= 0")
    total = 0.0
    grads = {}
    for name, t in params.named_tensors():
        if name == "w0":
            continue
        sub = t[rows] if (rows is not None and name in SPARSE_TENSORS) else t
        total += float(np.sum(sub * sub))
        grads[name] = 2.0 * lam * sub
    return lam * total, grads


@dataclass
class GradientSet:
    """Gradients for one step: dense tensors by name, sparse ones as (rows, values)."""

    dense: dict = field(default_factory=dict)
    sparse: dict = field(default_factory=dict)

    def to_dense(self, params: ParameterSet):
        out = {}
        for name, t in params.named_tensors():
            if name in self.sparse:
                rows, vals = self.sparse[name]
                g = np.zeros_like(t)
                g[rows] = vals
                out[name] = g
            elif name in self.dense:
                out[name] = self.dense[name]
            else:
                out[name] = np.zeros_like(t)
        return out


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParameterSet, beta1=0.9, beta2=0.999, eps=1e-8):
        m = {name: np.zeros_like(t) for name, t in params.named_tensors()}
        v = {name: np.zeros_like(t) for name, t in params.named_tensors()}
        return cls(m, v, 0, beta1, beta2, eps)


def adam_update(params: ParameterSet, state: AdamState, grads: GradientSet, learning_rate):
    """One Adam step in place.

    Sparse tensors are updated lazily: only the given rows have their
    moments and values touched. Bias correction uses the global step count.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.dense.items():
        theta = params.tensor(name)
        if g.shape != theta.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        theta -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    for name, (rows, g) in grads.sparse.items():
        theta = params.tensor(name)
        if g.shape[1:] != theta.shape[1:] or g.shape[0] != len(rows):
            raise ContractError(f"sparse gradient for {name} has shape {g.shape}")
        m_rows = state.m[name][rows] * state.beta1 + (1.0 - state.beta1) * g
        v_rows = state.v[name][rows] * state.beta2 + (1.0 - state.beta2) * (g * g)
        state.m[name][rows] = m_rows
        state.v[name][rows] = v_rows
        theta[rows] -= learning_rate * (m_rows / bc1) / (np.sqrt(v_rows / bc2) + state.eps)
    return params, state

"""Synthetic CTR data drawn from a hidden FM teacher with a known nonlinearity.

The teacher scores an instance as

    bias + sum(w_i x_i) + FM(t_i x_i) + sum_k alpha_k (x_k^2 - 1)

The ``alpha`` terms put a square effect on a few numerical fields, which no
model that is linear in each ``x`` can express. Numerical values are
standard normal, so the best linear stand-in for ``x^2 - 1`` is the
constant 0 and the linear-feature oracle is the teacher without them.

Teacher embeddings mix a field-level component shared by every feature of
the field with a feature-specific one, and categorical features follow a
Zipf law, so many features are rare. Fields can be absent at random.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .config import read_kv_file, write_kv_file
from .data import InstanceTable
from .errors import ConfigError
from .numerics import sigmoid


@dataclass(frozen=True)
class SynthConfig:
    n: int = 50000
    cardinalities: tuple = (1, 1, 1, 500, 1000, 2000, 3000, 5000, 5000, 8000)
    teacher_dim: int = 4
    teacher_scale: float = 0.5
    shared_scale: float = 0.9        # weight of the field-level component of teacher embeddings
    linear_scale: float = 0.3
    square_fields: tuple = (0, 1, 2)
    square_weight: float = 0.6
    noise: float = 0.0               # std of gaussian noise added to the teacher logit
    bias: float = -0.5
    zipf: float = 0.8
    missing_rate: float = 0.3
    teacher_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        object.__setattr__(self, "square_fields", tuple(int(k) for k in self.square_fields))
        self.validate()

    @property
    def f(self):
        return len(self.cardinalities)

    @property
    def numeric_fields(self):
        return tuple(k for k, c in enumerate(self.cardinalities) if c == 1)

    def validate(self):
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if not self.cardinalities:
            raise ConfigError("need at least one field")
        for k, c in enumerate(self.cardinalities):
            if c < 1:
                raise ConfigError(f"field {k}: cardinality must be >= 1, got {c}")
        for k in self.square_fields:
            if not 0 <= k < self.f or self.cardinalities[k] != 1:
                raise ConfigError(f"square field {k} is not a numerical field (cardinality 1)")
        if self.teacher_dim < 1:
            raise ConfigError("teacher_dim must be >= 1")
        if self.noise < 0 or not 0 <= self.missing_rate < 1:
            raise ConfigError("noise must be >= 0 and missing_rate in [0, 1)")

    def with_(self, **changes):
        return SynthConfig(**{**asdict(self), **changes})

    @classmethod
    def from_file(cls, path):
        known = set(cls.__dataclass_fields__)
        values = {}
        for key, value in read_kv_file(path):
            if key not in known:
                raise ConfigError(f"unknown synthetic config key {key!r}")
            values[key] = tuple(value) if isinstance(value, list) else value
        if "cardinalities" in values and not isinstance(values["cardinalities"], tuple):
            values["cardinalities"] = (values["cardinalities"],)
        if "square_fields" in values and not isinstance(values["square_fields"], tuple):
            values["square_fields"] = (values["square_fields"],)
        return cls(**values)

    def write(self, path):
        write_kv_file(path, [(k, list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()])


@dataclass
class Teacher:
    config: SynthConfig
    w: list                      # per-field linear weights
    t: list                      # per-field (cardinality, teacher_dim) embeddings
    alpha: np.ndarray            # square-term weight per field (0 off square_fields)
    popularity: list = field(default_factory=list)

    def logit(self, table, linear=False):
        """Noise-free teacher logit; ``linear=True`` gives the linear-feature oracle."""
        feats = table.features
        x = np.where(feats >= 0, table.values, 0.0)
        n = len(table)
        z = np.full(n, self.config.bias)
        acc = np.zeros((n, self.config.teacher_dim))
        sq = np.zeros(n)
        for k in range(self.config.f):
            rows = np.maximum(feats[:, k], 0)
            z += self.w[k][rows] * x[:, k]
            a = self.t[k][rows] * x[:, k, None]
            acc += a
            sq += np.einsum("nd,nd->n", a, a)
        z += 0.5 * (np.einsum("nd,nd->n", acc, acc) - sq)
        if not linear:
            z += (self.alpha[None, :] * np.where(feats >= 0, x * x - 1.0, 0.0)).sum(axis=1)
        return z


def build_teacher(config: SynthConfig):
    rng = np.random.default_rng(config.teacher_seed)
    f, dim = config.f, config.teacher_dim
    shared = rng.normal(0.0, 1.0, size=(f, dim))
    w, t, pop = [], [], []
    for k, card in enumerate(config.cardinalities):
        w.append(rng.normal(0.0, config.linear_scale, size=card))
        own = rng.normal(0.0, 1.0, size=(card, dim))
        mix = config.shared_scale * shared[k] + np.sqrt(max(1.0 - config.shared_scale ** 2, 0.0)) * own
        t.append(config.teacher_scale * mix)
        ranks = np.arange(1, card + 1, dtype=np.float64)
        p = ranks ** -config.zipf
        pop.append(p / p.sum())
    alpha = np.zeros(f)
    signs = rng.choice([-1.0, 1.0], size=len(config.square_fields))
    alpha[list(config.square_fields)] = config.square_weight * signs
    return Teacher(config, w, t, alpha, pop)


def sample_features(teacher: Teacher, n, rng):
    config = teacher.config
    feats = np.empty((n, config.f), dtype=np.int64)
    vals = np.ones((n, config.f))
    for k, card in enumerate(config.cardinalities):
        if card == 1:
            feats[:, k] = 0
            vals[:, k] = rng.normal(size=n)
        else:
            feats[:, k] = rng.choice(card, size=n, p=teacher.popularity[k])
    if config.missing_rate > 0:
        absent = rng.random((n, config.f)) < config.missing_rate
        feats[absent] = -1
        vals[absent] = 0.0
    return feats, vals


@dataclass
class SynthDataset:
    table: InstanceTable
    teacher: Teacher
    teacher_logit: np.ndarray


def synth_generate(config: SynthConfig, seed):
    """Draw ``config.n`` labelled instances; the teacher is fixed by ``config.teacher_seed``.

    Labels are Bernoulli(sigmoid(teacher logit + noise)). The data seed only
    controls sampling, so several datasets can share one teacher.
    """
    teacher = build_teacher(config)
    rng = np.random.default_rng([config.teacher_seed, seed])
    feats, vals = sample_features(teacher, config.n, rng)
    table = InstanceTable(feats, vals, np.zeros(config.n))
    z = teacher.logit(table)
    noisy = z + config.noise * rng.normal(size=config.n) if config.noise > 0 else z
    with np.errstate(invalid="ignore"):
        p = sigmoid(noisy)
    labels = (rng.random(config.n) < p).astype(np.float64)
    table.labels = labels
    return SynthDataset(table, teacher, z)

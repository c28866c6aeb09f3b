"""Joint training: objective, backward pass, Adam loop and gradient checking."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import InstanceTable, as_table, batch_indices
from .errors import NumericError
from .fgnet import generate_all_backward, merge_backward
from .metrics import auc, logloss, logloss_from_logit
from .numerics import ActivationKind, sigmoid
from .params import (
    AdamState, GradientSet, ModelConfig, ParameterSet, Variant, adam_update, build_parameters, l2_penalty,
)
from .scoring import ffm_pair_index, forward, predict_logits

log = logging.getLogger(__name__)


@dataclass
class LossReport:
    N: int
    mean_logloss: float
    penalty: float
    objective: float
    labels: np.ndarray = None
    predictions: np.ndarray = None


def _loss_terms(batch, scores):
    p = sigmoid(scores.logit)
    losses = logloss_from_logit(batch.labels, scores.logit)
    bad = ~np.isfinite(losses)
    if bad.any():
        idx = int(np.argmax(bad))
        raise NumericError(f"non-finite loss at instance {idx} (logit={scores.logit[idx]!r})", idx)
    return p, losses


def _scatter_rows(rows, mask, values):
    flat_rows = rows[mask]
    uniq, inv = np.unique(flat_rows, return_inverse=True)
    acc = np.zeros((len(uniq),) + values.shape[2:])
    np.add.at(acc, inv, values[mask])
    return uniq, acc


def _data_gradients(batch, params, config, scale):
    """Gradients of ``scale * sum(logloss)`` plus the loss report (no penalty)."""
    scores, cache = forward(batch, params, config)
    p, losses = _loss_terms(batch, scores)
    dlogit = (p - batch.labels) * scale
    x, rows, mask = cache.x, cache.rows, cache.mask
    grads = GradientSet()
    grads.dense["w0"] = np.array([dlogit.sum()])
    grads.sparse["w"] = _scatter_rows(rows, mask, dlogit[:, None] * x)

    variant = config.variant
    if variant is Variant.FFM:
        A, Bv, xx = cache.ffm_pair
        K, L, slot_k, slot_l = ffm_pair_index(config.f)
        coef = (dlogit[:, None] * xx)[:, :, None]
        dE = np.zeros_like(cache.E)
        dE[:, K, slot_k] = coef * Bv
        dE[:, L, slot_l] = coef * A
    else:
        A = cache.active
        S = A.sum(axis=1)
        dA = dlogit[:, None, None] * (S[:, None, :] - A)
        if variant is Variant.FM:
            dE = dA * x[:, :, None]
        else:
            B, f, d = cache.E.shape
            if variant is Variant.LA_FM:
                dM = dA.reshape(B, f, config.u + 1, d) * x[:, :, None, None]
                dE = dM[:, :, 0].copy()
                dG = dM[:, :, 1:]
            else:
                dM = dA * x[:, :, None]
                dE, dG, ln_grads = merge_backward(dM, cache.merged, cache.feature_set)
                if ln_grads is not None:
                    grads.dense["ln_gain"], grads.dense["ln_bias"] = ln_grads
            dE_gen, dWs, dbs = generate_all_backward(dG, cache.gen_cache, params)
            dE = dE + dE_gen
            for l, (gW, gb) in enumerate(zip(dWs, dbs)):
                grads.dense[f"fg_W.{l}"] = gW
                grads.dense[f"fg_b.{l}"] = gb
    grads.sparse["V"] = _scatter_rows(rows, mask, dE)
    return grads, p, losses


def _merge_gradients(parts):
    out = GradientSet()
    for name in parts[0].dense:
        out.dense[name] = sum(g.dense[name] for g in parts)
    for name in parts[0].sparse:
        rows = np.concatenate([g.sparse[name][0] for g in parts])
        vals = np.concatenate([g.sparse[name][1] for g in parts])
        uniq, inv = np.unique(rows, return_inverse=True)
        acc = np.zeros((len(uniq),) + vals.shape[1:])
        np.add.at(acc, inv, vals)
        out.sparse[name] = (uniq, acc)
    return out


def _add_penalty(grads, params, lam):
    rows = grads.sparse["w"][0]
    if lam == 0:
        return 0.0
    penalty, pgrads = l2_penalty(params, lam, rows=rows)
    for name, g in pgrads.items():
        if name in grads.sparse:
            r, vals = grads.sparse[name]
            grads.sparse[name] = (r, vals + g)
        else:
            grads.dense[name] = grads.dense[name] + g
    return penalty


def backward_batch(batch, params, config, executor=None, threads=1):
    """Gradients of the batch objective and its ``LossReport``.

    The objective is the mean logloss plus the L2 penalty over the dense
    tensors and the rows of ``w``/``V`` this batch touches.
    """
    batch = as_table(batch, config.f)
    N = len(batch)
    if N == 0:
        raise ValueError("empty batch")
    if threads > 1 and N >= 2 * threads:
        chunks = np.array_split(np.arange(N), threads)
        run = lambda idx: _data_gradients(batch.take(idx), params, config, 1.0 / N)
        results = list((executor or ThreadPoolExecutor(threads)).map(run, chunks))
        grads = _merge_gradients([r[0] for r in results])
        p = np.concatenate([r[1] for r in results])
        losses = np.concatenate([r[2] for r in results])
    else:
        grads, p, losses = _data_gradients(batch, params, config, 1.0 / N)
    penalty = _add_penalty(grads, params, config.l2)
    mean_loss = float(np.mean(losses))
    return grads, LossReport(N, mean_loss, penalty, mean_loss + penalty, batch.labels, p)


def batch_objective(batch, params, config, pairwise=False):
    """Objective value only, matching what ``backward_batch`` differentiates."""
    batch = as_table(batch, config.f)
    scores, cache = forward(batch, params, config, pairwise=pairwise)
    p, losses = _loss_terms(batch, scores)
    penalty = 0.0
    if config.l2:
        rows = np.unique(cache.rows[cache.mask])
        penalty, _ = l2_penalty(params, config.l2, rows=rows)
    mean_loss = float(np.mean(losses))
    return LossReport(len(batch), mean_loss, penalty, mean_loss + penalty, batch.labels, p)


def dataset_objective(table, params, config, chunk=8192):
    """Mean logloss over ``table`` plus the full L2 penalty."""
    logits = predict_logits(table, params, config, chunk)
    mean_loss = float(np.mean(logloss_from_logit(table.labels, logits)))
    penalty = l2_penalty(params, config.l2)[0] if config.l2 else 0.0
    return mean_loss + penalty


@dataclass
class EpochRecord:
    epoch: int
    train_objective: float
    val_auc: float
    val_logloss: float
    seconds: float

    def __str__(self):
        return (f"epoch={self.epoch}\tobjective={self.train_objective:.6f}\tval_auc={self.val_auc:.6f}"
                f"\tval_logloss={self.val_logloss:.6f}\ttime={self.seconds:.2f}s")


@dataclass
class TrainRun:
    config: ModelConfig
    records: list = field(default_factory=list)
    initial_objective: float = float("nan")
    best_epoch: int = 0
    best_params: ParameterSet = None
    final_params: ParameterSet = None
    stopped_early: bool = False

    @property
    def best_val_auc(self):
        return max((r.val_auc for r in self.records), default=float("nan"))


def epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(config: ModelConfig, split, threads=1, on_epoch=None, params=None):
    """Adam training with per-epoch validation and patience-based early stopping.

    The best checkpoint is the epoch with the highest validation AUC; with
    ``threads == 1`` the run is bit-for-bit reproducible under ``config.seed``.
    """
    train_t = as_table(split.train, config.f)
    val_t = as_table(split.validation, config.f)
    if len(train_t) == 0 or len(val_t) == 0:
        raise ValueError("training and validation splits must be nonempty")
    params = build_parameters(config) if params is None else params
    state = AdamState.zeros_like(params, config.beta1, config.beta2, config.adam_eps)
    run = TrainRun(config, initial_objective=dataset_objective(train_t, params, config))
    run.best_params = params.copy()
    best_auc, since_best = -np.inf, 0
    executor = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            total, count = 0.0, 0
            for idx in batch_indices(len(train_t), config.batch_size, epoch_seed(config.seed, epoch)):
                grads, report = backward_batch(train_t.take(idx), params, config, executor, threads)
                if not np.isfinite(report.objective):
                    raise NumericError(f"objective diverged at epoch {epoch}: {report.objective!r}")
                adam_update(params, state, grads, config.learning_rate)
                total += report.objective * report.N
                count += report.N
            if not params.is_finite():
                raise NumericError(f"parameters became non-finite at epoch {epoch}")
            val_p = sigmoid(predict_logits(val_t, params, config))
            rec = EpochRecord(epoch, total / count, auc(val_p, val_t.labels),
                              float(np.mean(logloss(val_t.labels, val_p))), time.perf_counter() - t0)
            run.records.append(rec)
            log.info("%s", rec)
            if on_epoch is not None:
                on_epoch(rec)
            if rec.val_auc > best_auc:
                best_auc, since_best = rec.val_auc, 0
                run.best_epoch = epoch
                run.best_params = params.copy()
            else:
                since_best += 1
                if since_best >= config.patience:
                    run.stopped_early = True
                    break
    finally:
        if executor is not None:
            executor.shutdown()
    run.final_params = params
    return run


# ---------------------------------------------------------------------------
# finite-difference gradient checking

REL_ERR_FLOOR = 1e-3
KINK_MARGIN = 1e-4
MAX_CHECK_LOGIT = 10.0  # FD round-off grows with |objective|; keeps step-1e-6 noise well under 1e-6


def relative_error(analytic, numeric):
    """``|a - n| / max(|a|, |n|, 1e-3)``; the floor keeps near-zero gradients from
    turning round-off into large relative errors."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_ERR_FLOOR)


def tensor_class(name):
    return name.split(".")[0]


@dataclass
class GradCheckReport:
    variant: str
    config: ModelConfig
    tolerance: float
    max_error: dict = field(default_factory=dict)
    n_checked: int = 0
    n_resampled: int = 0

    @property
    def worst(self):
        return max(self.max_error.values(), default=0.0)

    @property
    def passed(self):
        return self.worst < self.tolerance

    def lines(self):
        c = self.config
        head = f"{self.variant}\tp={c.p}\tr={c.r}\tu={c.u}\tact={c.fgnet_activation.value}"
        out = [f"{head}\t{name}\t{err:.3e}" for name, err in sorted(self.max_error.items())]
        out.append(f"{head}\tworst={self.worst:.3e}\ttol={self.tolerance:.0e}\t{'PASS' if self.passed else 'FAIL'}")
        return out


def uses_relu(config):
    return config.variant.is_leaf and config.fgnet_activation is ActivationKind.RELU


def random_tiny_case(config, rng, batch_size=5):
    """Random parameters of realistic magnitude and a random batch for ``config``.

    FGNet weights keep their glorot initialization; everything else is drawn
    uniformly so that no gradient is trivially zero.
    """
    params = build_parameters(config, seed=int(rng.integers(2**31)))
    params.V[...] = rng.uniform(-1.0, 1.0, size=params.V.shape)
    params.w[...] = rng.uniform(-0.5, 0.5, size=params.w.shape)
    params.w0[...] = rng.uniform(-0.5, 0.5, size=1)
    for b in params.fg_b:
        b[...] = rng.uniform(-0.5, 0.5, size=b.shape)
    if params.ln_gain is not None:
        params.ln_gain[...] = rng.uniform(0.5, 1.5, size=params.ln_gain.shape)
        params.ln_bias[...] = rng.uniform(-0.5, 0.5, size=params.ln_bias.shape)
    f = config.f
    feats = np.stack([rng.integers(0, v, size=batch_size) for v in config.per_field_vocab], axis=1)
    vals = np.where(rng.random((batch_size, f)) < 0.5, 1.0, rng.uniform(-1.5, 1.5, size=(batch_size, f)))
    absent = rng.random((batch_size, f)) < 0.15
    feats[absent] = -1
    vals[absent] = 0.0
    labels = rng.integers(0, 2, size=batch_size).astype(float)
    return params, InstanceTable(feats, vals, labels)


def _well_conditioned(batch, params, config):
    """No logit near the loss clamp and, for ReLU, no pre-activation near a kink."""
    scores, cache = forward(batch, params, config)
    if np.max(np.abs(scores.logit)) > MAX_CHECK_LOGIT:
        return False
    if uses_relu(config):
        return min(float(np.min(np.abs(z))) for z in cache.gen_cache.pre) > KINK_MARGIN
    return True


def gradient_check(config: ModelConfig, n_cases=1, tolerance=1e-4, seed=0, step=1e-6, batch_size=5):
    """Compare ``backward_batch`` with central differences of ``batch_objective``
    for every scalar parameter of random tiny models.

    Cases are resampled until every logit is well inside the loss clamp and,
    for ReLU, every pre-activation is at least ``KINK_MARGIN`` from zero so no
    perturbation crosses a kink.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(config.variant.value, config, tolerance)
    for _ in range(n_cases):
        while True:
            params, batch = random_tiny_case(config, rng, batch_size)
            if _well_conditioned(batch, params, config):
                break
            report.n_resampled += 1
        grads, _ = backward_batch(batch, params, config)
        analytic = grads.to_dense(params)
        for name, t in params.named_tensors():
            flat = t.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                plus = batch_objective(batch, params, config, pairwise=True).objective
                flat[i] = orig - step
                minus = batch_objective(batch, params, config, pairwise=True).objective
                flat[i] = orig
                numeric[i] = (plus - minus) / (2 * step)
            err = float(np.max(relative_error(analytic[name].reshape(-1), numeric)))
            cls = tensor_class(name)
            report.max_error[cls] = max(report.max_error.get(cls, 0.0), err)
            report.n_checked += flat.size
    return report


def kink_free(config):
    """True when the objective is smooth and has no LayerNorm (fm, ffm, identity la_fm)."""
    return config.variant in (Variant.FM, Variant.FFM) or (
        config.variant is Variant.LA_FM and config.fgnet_activation is ActivationKind.IDENTITY)


def default_tolerance(config):
    return 1e-6 if kink_free(config) else 1e-4


def tiny_config(variant, p=2, r=1, u=1, activation=ActivationKind.RELU, d=3, vocab=(3, 4, 2)):
    """Smallest useful model for gradient checking (d <= 4, vocab <= 8)."""
    return ModelConfig(variant=Variant(variant), per_field_vocab=tuple(vocab), d=d, r=r, p=p, u=u,
                       activation=activation, l2=1e-3)


def gradcheck_grid(ps=(2, 3, 5), rs=(1, 2), us=(1, 3)):
    """Every legal (variant, p, r, u) tiny config. fm and ffm ignore the FGNet
    axes but are still checked at every grid point on fresh random cases."""
    configs = []
    for p in ps:
        for r in rs:
            for u in us:
                configs += [tiny_config("fm", p, r, u), tiny_config("ffm", p, r, u)]
                for act in (ActivationKind.RELU, ActivationKind.IDENTITY):
                    configs.append(tiny_config("la_fm", p, r, u, act))
                configs.append(tiny_config("ls_fm", p, r, u))
                if u == 1:
                    configs.append(tiny_config("lp_fm", p, r, u))
    return configs

"""AUC and logloss evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricUndefinedError

LOGLOSS_CLIP = 1e-12


def logloss(y, p):
    """Binary cross-entropy with ``p`` clamped to [1e-12, 1 - 1e-12]; vectorized."""
    p = np.clip(np.asarray(p, dtype=np.float64), LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP)
    y = np.asarray(y, dtype=np.float64)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return out if out.ndim else float(out)


LOGIT_CLIP = float(np.log((1.0 - LOGLOSS_CLIP) / LOGLOSS_CLIP))


def logloss_from_logit(y, z):
    """Same value as ``logloss(y, sigmoid(z))`` but computed as ``softplus(z) - y*z``,
    which keeps full precision when the probability is close to 0 or 1."""
    z = np.clip(np.asarray(z, dtype=np.float64), -LOGIT_CLIP, LOGIT_CLIP)
    y = np.asarray(y, dtype=np.float64)
    out = np.logaddexp(0.0, z) - y * z
    return out if out.ndim else float(out)


def _average_ranks(scores):
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    _, first, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    # 1-based average rank of each tie group
    group_rank = first + (counts + 1) / 2.0
    ranks = np.empty(len(scores))
    ranks[order] = np.repeat(group_rank, counts)
    return ranks


def auc(scores, labels):
    """Mann-Whitney AUC from rank sums; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs at least one positive and one negative label")
    ranks = _average_ranks(scores)
    u_stat = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


@dataclass(frozen=True)
class EvalResult:
    auc: float
    mean_logloss: float
    n_pos: int
    n_neg: int

    def __str__(self):
        return f"auc={self.auc:.6f}\tlogloss={self.mean_logloss:.6f}\tn_pos={self.n_pos}\tn_neg={self.n_neg}"


def evaluate(scorer, instances):
    """Score ``instances`` with ``scorer`` (table -> probabilities) and summarize."""
    if len(instances) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    probs = np.asarray(scorer(instances), dtype=np.float64)
    labels = np.asarray(instances.labels)
    n_pos = int((labels == 1).sum())
    return EvalResult(auc(probs, labels), float(np.mean(logloss(labels, probs))), n_pos, len(labels) - n_pos)

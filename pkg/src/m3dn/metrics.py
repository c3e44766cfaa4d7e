"""
Multi-label ranking criteria.

Inputs are ``scores`` (n, L), higher meaning more confident, and binary
``truth`` (n, L). Coverage and average precision rank pessimistically (a tied
label counts as ranked ahead); ranking loss and the AUC family give half
credit to ties.
"""

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyInput


def _prep(scores, truth):
    S = np.atleast_2d(np.asarray(scores, dtype=float))
    Y = np.atleast_2d(np.asarray(truth)).astype(bool)
    if S.shape != Y.shape:
        raise ValueError(f"scores {S.shape} and truth {Y.shape} differ in shape")
    if S.shape[0] == 0:
        raise EmptyInput("no evaluation pairs")
    if not np.all(np.isfinite(S)):
        raise ValueError("scores must be finite")
    return S, Y


def _pessimistic_rank(S):
    # rank_j = #{k : s_k >= s_j}
    return (S[:, None, :] >= S[:, :, None]).sum(axis=2)


def coverage(scores, truth):
    """Mean over examples of the worst rank of a relevant label, minus one."""
    S, Y = _prep(scores, truth)
    keep = Y.any(axis=1)
    if not keep.any():
        raise EmptyInput("no example has a relevant label")
    rank = _pessimistic_rank(S[keep])
    worst = np.where(Y[keep], rank, 0).max(axis=1)
    return float(np.mean(worst - 1))


def _pair_stats(S, Y):
    # per example: sum over (relevant i, irrelevant j) of [s_i < s_j] + 0.5 [s_i == s_j]
    rel = Y[:, :, None] & ~Y[:, None, :]
    wrong = (S[:, :, None] < S[:, None, :]) + 0.5 * (S[:, :, None] == S[:, None, :])
    bad = np.sum(rel * wrong, axis=(1, 2))
    npairs = Y.sum(axis=1) * (~Y).sum(axis=1)
    return bad, npairs


def ranking_loss(scores, truth):
    S, Y = _prep(scores, truth)
    bad, npairs = _pair_stats(S, Y)
    keep = npairs > 0
    if not keep.any():
        raise EmptyInput("no example has both relevant and irrelevant labels")
    return float(np.mean(bad[keep] / npairs[keep]))


def average_precision(scores, truth):
    S, Y = _prep(scores, truth)
    keep = Y.any(axis=1)
    if not keep.any():
        raise EmptyInput("no example has a relevant label")
    S, Y = S[keep], Y[keep]
    rank = _pessimistic_rank(S)
    # relevant labels ranked at or above label j
    above = (Y[:, None, :] & (S[:, None, :] >= S[:, :, None])).sum(axis=2)
    prec = np.where(Y, above / rank, 0.0)
    return float(np.mean(prec.sum(axis=1) / Y.sum(axis=1)))


def binary_auc(scores, labels):
    """Mann-Whitney AUC with midranks; nan when one class is absent."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    npos = int(y.sum())
    nneg = y.size - npos
    if npos == 0 or nneg == 0:
        return float("nan")
    r = rankdata(s)
    return float((r[y].sum() - npos * (npos + 1) / 2.0) / (npos * nneg))


def auc_family(scores, truth):
    """Macro (per label), micro (pooled cells) and example (per row) AUC.

    A flavor with no valid label/example comes back as nan.
    """
    S, Y = _prep(scores, truth)
    macro = [binary_auc(S[:, j], Y[:, j]) for j in range(S.shape[1])]
    macro = [a for a in macro if not np.isnan(a)]
    bad, npairs = _pair_stats(S, Y)
    keep = npairs > 0
    return {
        "macro_auc": float(np.mean(macro)) if macro else float("nan"),
        "micro_auc": binary_auc(S, Y),
        "example_auc": float(np.mean(1.0 - bad[keep] / npairs[keep])) if keep.any() else float("nan"),
    }


CRITERIA = ("coverage", "ranking_loss", "average_precision", "macro_auc", "micro_auc", "example_auc")


def evaluate(scores, truth):
    """All six criteria as a flat dict (nan where a criterion is undefined)."""
    S, Y = _prep(scores, truth)
    out = {}
    for name, fn in (("coverage", coverage), ("ranking_loss", ranking_loss), ("average_precision", average_precision)):
        try:
            out[name] = fn(S, Y)
        except EmptyInput:
            out[name] = float("nan")
    out.update(auc_family(S, Y))
    return {k: out[k] for k in CRITERIA}

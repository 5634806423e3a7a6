"""Evaluation quantities: accuracy, AUC, forgetting, stratified summaries, regret."""
from __future__ import annotations

import math
from collections import defaultdict

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise DataError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise DataError("accuracy of an empty set is undefined")
    return float(np.mean(preds == labels))


def auc_binary(scores, labels) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie), via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise DataError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def forgetting(A, reference="max") -> float:
    """Mean drop from a batch's reference accuracy to its final accuracy.

    ``A[s, t]`` is the accuracy on batch ``t`` after processing batch ``s``
    (only ``t <= s`` is read).  ``reference="max"`` compares against the best
    accuracy ever reached on that batch; ``"first"`` against the accuracy
    right after the batch was learned.
    """
    A = np.asarray(A, dtype=np.float64)
    T = A.shape[0]
    if T < 2:
        raise DataError("forgetting needs at least 2 batches")
    drops = []
    for t in range(T - 1):
        col = A[t:, t]
        ref = col.max() if reference == "max" else col[0]
        drops.append(ref - col[-1])
    return float(np.mean(drops))


def severity_stratified(logs, value="heldout_acc_final", level="batch"):
    """Mean and sample std of accuracy per (method, severity) stratum.

    ``level="batch"`` pools per-batch values, each batch graded by its own
    severity label.  ``level="run"`` contributes one value per run (its
    ``final_avg_acc``), graded by the run-level ``regime`` in its summary.
    Strata with no data are simply absent.
    """
    groups = defaultdict(list)
    for log in logs:
        if level == "run":
            groups[(log.method, log.summary["regime"])].append(log.summary["final_avg_acc"])
            continue
        final_row = log.accuracy_matrix[-1]
        for rec in log.records:
            sev = rec.get("severity")
            if sev is None:
                continue
            v = final_row[rec["t"]] if value == "heldout_acc_final" else rec[value]
            groups[(log.method, sev)].append(float(v))
    table = {}
    for key in sorted(groups):
        vals = np.asarray(groups[key])
        table[key] = {
            "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            "count": int(vals.size),
            "single": vals.size == 1,
        }
    return table


def regret_series(per_batch_loss, hindsight_loss):
    """Cumulative regret ``R[t]`` and its running average ``R[t] / (t + 1)``."""
    a = np.asarray(per_batch_loss, dtype=np.float64)
    b = np.asarray(hindsight_loss, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError("loss series differ in length")
    R = np.cumsum(a - b)
    return R, R / np.arange(1, len(R) + 1)


def mean_std(values):
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        return math.nan, math.nan
    return float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0

"""Sample-based KL divergence between consecutive batch feature distributions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError

VAR_FLOOR = 1e-6
DEFAULT_BINS = 32


@dataclass(frozen=True)
class BatchStats:
    mean: np.ndarray
    var: np.ndarray
    n: int
    hist: Optional[np.ndarray] = None    # d_x x B counts
    edges: Optional[np.ndarray] = None   # d_x x (B + 1)

    @property
    def d_x(self):
        return self.mean.size

    def to_json(self, with_hist=False):
        out = {"mean": self.mean.tolist(), "var": self.var.tolist(), "n": self.n}
        if with_hist and self.hist is not None:
            out["hist"] = self.hist.tolist()
            out["edges"] = self.edges.tolist()
        return out


def bin_edges_from(X, bins=DEFAULT_BINS, margin=0.1):
    """Shared per-feature edges spanning the sample range widened by ``margin``."""
    X = np.asarray(X, dtype=np.float64)
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = hi - lo
    pad = np.where(span > 0, margin * span, margin * np.maximum(np.abs(lo), 1.0))
    lo, hi = lo - pad, hi + pad
    return lo[:, None] + (hi - lo)[:, None] * np.linspace(0.0, 1.0, bins + 1)[None, :]


def summarize(X, edges=None) -> BatchStats:
    """Moments (and optional histograms) of a feature matrix.

    Pass training rows only.  Values outside ``edges`` fall in the end bins.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ShapeError("summarize needs a nonempty feature matrix")
    mean = X.mean(axis=0)
    var = np.maximum(X.var(axis=0), VAR_FLOOR)
    hist = None
    if edges is not None:
        edges = np.asarray(edges, dtype=np.float64)
        if edges.shape[0] != X.shape[1] or np.any(np.diff(edges, axis=1) <= 0):
            raise ShapeError("edges must be strictly increasing, one row per feature")
        B = edges.shape[1] - 1
        hist = np.empty((X.shape[1], B), dtype=np.int64)
        for j in range(X.shape[1]):
            idx = np.searchsorted(edges[j], X[:, j], side="right") - 1
            hist[j] = np.bincount(np.clip(idx, 0, B - 1), minlength=B)
    return BatchStats(mean, var, X.shape[0], hist, edges)


def _check_dims(P, Q):
    if P.d_x != Q.d_x:
        raise ShapeError(f"dimension mismatch: {P.d_x} vs {Q.d_x}")


def kl_gaussian(P: BatchStats, Q: BatchStats) -> float:
    """KL(P || Q) between diagonal Gaussian fits."""
    _check_dims(P, Q)
    if P is Q:
        return 0.0
    ratio = P.var / Q.var
    terms = 0.5 * (-np.log(ratio) + ratio + (P.mean - Q.mean) ** 2 / Q.var - 1.0)
    return float(max(terms.sum(), 0.0))


def kl_histogram(P: BatchStats, Q: BatchStats, smoothing=1.0) -> float:
    """Mean over features of the smoothed histogram KL(P || Q)."""
    _check_dims(P, Q)
    if P.hist is None or Q.hist is None:
        raise ShapeError("histogram KL needs stats built with bin edges")
    if P.edges.shape != Q.edges.shape or not np.array_equal(P.edges, Q.edges):
        raise ShapeError("histogram KL needs identical bin edges")
    if smoothing <= 0:
        raise ValueError("smoothing must be > 0")
    B = P.hist.shape[1]
    p = (P.hist + smoothing) / (P.n + B * smoothing)
    q = (Q.hist + smoothing) / (Q.n + B * smoothing)
    kl = (p * np.log(p / q)).sum(axis=1)
    return float(max(kl.mean(), 0.0))


ESTIMATORS = {"gaussian": kl_gaussian, "histogram": kl_histogram}


def delta_scs(prev: BatchStats, curr: BatchStats, estimator="gaussian") -> float:
    """Shift magnitude between consecutive batches, computed as KL(curr || prev)."""
    try:
        fn = ESTIMATORS[estimator]
    except KeyError:
        raise ValueError(f"unknown estimator {estimator!r}") from None
    return fn(curr, prev)

"""Diagonal Fisher information: per-batch estimate, EMA smoothing, distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

DEFAULT_SUBSAMPLE = 256
INIT_EPSILON = 1e-4


@dataclass(frozen=True)
class DiagonalFim:
    diag: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        diag = np.asarray(self.diag, dtype=np.float64)
        if diag.ndim != 1:
            raise ShapeError("Fisher diagonal must be a vector")
        if not np.all(diag >= 0):
            raise ValueError("Fisher diagonal entries must be nonnegative")
        object.__setattr__(self, "diag", diag)

    def __len__(self):
        return self.diag.size

    @classmethod
    def initial(cls, d, epsilon=INIT_EPSILON):
        return cls(np.full(d, float(epsilon)), 0)


def _check_pair(a, b):
    if len(a) != len(b):
        raise ShapeError(f"Fisher length mismatch: {len(a)} vs {len(b)}")


def subsample_rows(n, subsample, seed):
    m = min(int(subsample), n)
    return np.sort(np.random.default_rng(seed).permutation(n)[:m])


def empirical_fisher(scores):
    """Mean of squared per-sample scores (rows are samples)."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.mean(scores * scores, axis=0)


def estimate_fim(model, theta, X, y, subsample=DEFAULT_SUBSAMPLE, seed=0) -> DiagonalFim:
    """Empirical diagonal Fisher of ``model`` at ``theta`` on a seeded row subsample.

    ``model`` needs a ``per_sample_scores(theta, X, y)`` method returning an
    ``n x d`` matrix of gradients of the per-sample log-likelihood; a
    ``fisher_diagonal(theta, X, y)`` method, when present, is used instead.
    """
    if subsample < 1:
        raise ConfigError("subsample", "must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 1:
        raise ShapeError("cannot estimate Fisher information on an empty batch")
    rows = subsample_rows(X.shape[0], subsample, seed)
    y = np.asarray(y)
    direct = getattr(model, "fisher_diagonal", None)
    if direct is not None:
        diag = direct(theta, X[rows], y[rows])
    else:
        diag = empirical_fisher(model.per_sample_scores(theta, X[rows], y[rows]))
    return DiagonalFim(np.maximum(diag, 0.0), len(rows))


def ema_update(I_global: DiagonalFim, I_t: DiagonalFim, alpha: float) -> DiagonalFim:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha", f"must lie in [0, 1], got {alpha}")
    _check_pair(I_global, I_t)
    if alpha == 1.0:
        return I_global
    if alpha == 0.0:
        return I_t
    diag = alpha * I_global.diag + (1.0 - alpha) * I_t.diag
    return DiagonalFim(diag, I_global.sample_count + I_t.sample_count)


def fim_distance(I_a: DiagonalFim, I_b: DiagonalFim) -> float:
    """Frobenius norm of the difference of two diagonal Fisher matrices."""
    _check_pair(I_a, I_b)
    diff = I_a.diag - I_b.diag
    scale = float(np.max(np.abs(diff), initial=0.0))
    if scale == 0.0:
        return 0.0
    # rescale so tiny differences do not underflow to a zero norm
    return scale * float(np.linalg.norm(diff / scale))

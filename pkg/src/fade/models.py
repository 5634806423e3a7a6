"""Small differentiable classifiers with exact per-sample gradients.

Parameters live in one flat float64 vector.  The layout is fixed per
architecture and documented by :meth:`Model.layout`:

``logistic``, binary
    ``w`` (d_x), ``b`` (1).  A single logit ``z = w.x + b``; ``p(y=1) = sigmoid(z)``.
``logistic``, C > 2 classes
    ``W`` (d_x x C, row-major), ``b`` (C) with a softmax link.
``mlp1``
    ``W1`` (d_x x hidden), ``b1`` (hidden), ``W2`` (hidden x K), ``b2`` (K),
    tanh hidden activation, where K is 1 for binary problems and C otherwise.
"""
from __future__ import annotations

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ShapeError

LOG_CLAMP = 1e-12
_MAX_NLL = -np.log(LOG_CLAMP)


class ModelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    arch: Literal["logistic", "mlp1"] = "logistic"
    d_x: int = Field(ge=1)
    n_classes: int = Field(default=2, ge=2)
    hidden: int = Field(default=16, ge=1)
    init_seed: int = 0


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class Model:
    """Stateless evaluator for one architecture; parameters are passed in."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.binary = spec.n_classes == 2
        self.n_out = 1 if self.binary else spec.n_classes
        self._shapes = self._build_layout()
        self.n_params = int(sum(int(np.prod(s)) for _, s in self._shapes))

    def _build_layout(self):
        s = self.spec
        if s.arch == "logistic":
            if self.binary:
                return [("w", (s.d_x,)), ("b", (1,))]
            return [("W", (s.d_x, s.n_classes)), ("b", (s.n_classes,))]
        return [
            ("W1", (s.d_x, s.hidden)),
            ("b1", (s.hidden,)),
            ("W2", (s.hidden, self.n_out)),
            ("b2", (self.n_out,)),
        ]

    def layout(self):
        """List of ``(name, shape)`` in storage order."""
        return list(self._shapes)

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        out, pos = {}, 0
        for name, shape in self._shapes:
            size = int(np.prod(shape))
            out[name] = theta[pos:pos + size].reshape(shape)
            pos += size
        return out

    def init_params(self):
        if self.spec.arch == "logistic":
            return np.zeros(self.n_params)
        rng = np.random.default_rng(self.spec.init_seed)
        parts = []
        for name, shape in self._shapes:
            fan_in = self.spec.d_x if name in ("W1", "b1") else self.spec.hidden
            bound = 1.0 / np.sqrt(fan_in)
            parts.append(rng.uniform(-bound, bound, size=shape).ravel())
        return np.concatenate(parts)

    # -- forward -----------------------------------------------------------

    def _check_x(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X2 = X[None, :] if single else X
        if X2.ndim != 2 or X2.shape[1] != self.spec.d_x:
            raise ShapeError(f"expected rows of length {self.spec.d_x}, got shape {X.shape}")
        return X2, single

    def _hidden_and_logits(self, theta, X):
        p = self.unpack(theta)
        if self.spec.arch == "logistic":
            if self.binary:
                return None, X @ p["w"][:, None] + p["b"]
            return None, X @ p["W"] + p["b"]
        A = np.tanh(X @ p["W1"] + p["b1"])
        return A, A @ p["W2"] + p["b2"]

    def _log_probs(self, logits):
        if self.binary:
            z = logits[:, 0]
            return np.column_stack([_log_sigmoid(-z), _log_sigmoid(z)])
        return _log_softmax(logits)

    def forward(self, theta, x):
        """Class probabilities for one row (shape C) or a matrix (n x C)."""
        X, single = self._check_x(x)
        _, logits = self._hidden_and_logits(theta, X)
        probs = np.exp(self._log_probs(logits))
        probs /= probs.sum(axis=1, keepdims=True)
        return probs[0] if single else probs

    def predict(self, theta, X):
        return np.argmax(self.forward(theta, X), axis=-1)

    # -- likelihood and gradients -----------------------------------------

    def _logit_scores(self, theta, X, y):
        """Per-sample d log p(y|x) / d logits, plus hidden activations and NLL."""
        X, _ = self._check_x(X)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise ShapeError(f"labels shape {y.shape} does not match {X.shape[0]} rows")
        if y.size and (y.min() < 0 or y.max() >= self.spec.n_classes):
            raise ShapeError(f"labels must lie in 0..{self.spec.n_classes - 1}")
        A, logits = self._hidden_and_logits(theta, X)
        logp = self._log_probs(logits)
        logp_y = logp[np.arange(len(y)), y]
        nll = -logp_y
        # past the clamp the loss is constant, so its gradient vanishes
        live = nll < _MAX_NLL
        nll = np.minimum(nll, _MAX_NLL)
        probs = np.exp(logp)
        if self.binary:
            dz = (y - probs[:, 1])[:, None]
        else:
            dz = -probs
            dz[np.arange(len(y)), y] += 1.0
        dz = dz * live[:, None]
        return X, A, dz, nll

    def nll_and_grad(self, theta, X, y):
        """Mean negative log-likelihood and its exact gradient."""
        X, A, dz, nll = self._logit_scores(theta, X, y)
        n = X.shape[0]
        G = -dz / n
        p = self.unpack(theta)
        if self.spec.arch == "logistic":
            gw = X.T @ G
            grad = np.concatenate([gw.ravel(), G.sum(axis=0)])
        else:
            gW2 = A.T @ G
            gb2 = G.sum(axis=0)
            dH = (G @ p["W2"].T) * (1.0 - A * A)
            gW1 = X.T @ dH
            gb1 = dH.sum(axis=0)
            grad = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
        return float(nll.mean()), grad

    def nll(self, theta, X, y):
        return float(self._logit_scores(theta, X, y)[3].mean())

    def per_sample_scores(self, theta, X, y):
        """Score vectors, one row per sample: grad of log p(y_i|x_i)."""
        X, A, dz, _ = self._logit_scores(theta, X, y)
        n = X.shape[0]
        if self.spec.arch == "logistic":
            gw = (X[:, :, None] * dz[:, None, :]).reshape(n, -1)
            return np.concatenate([gw, dz], axis=1)
        p = self.unpack(theta)
        gW2 = (A[:, :, None] * dz[:, None, :]).reshape(n, -1)
        dH = (dz @ p["W2"].T) * (1.0 - A * A)
        gW1 = (X[:, :, None] * dH[:, None, :]).reshape(n, -1)
        return np.concatenate([gW1, dH, gW2, dz], axis=1)

    def fisher_diagonal(self, theta, X, y):
        """Mean squared score per parameter, without forming the score matrix.

        Every weight block's score is an outer product ``a_i g_i^T``, so the
        mean of its elementwise square is ``(A**2).T @ (G**2) / n``.
        """
        X, A, dz, _ = self._logit_scores(theta, X, y)
        n = X.shape[0]
        dz2 = dz * dz
        if self.spec.arch == "logistic":
            return np.concatenate([((X * X).T @ dz2).ravel() / n, dz2.mean(axis=0)])
        p = self.unpack(theta)
        dH = (dz @ p["W2"].T) * (1.0 - A * A)
        dH2 = dH * dH
        return np.concatenate([((X * X).T @ dH2).ravel() / n, dH2.mean(axis=0),
                               ((A * A).T @ dz2).ravel() / n, dz2.mean(axis=0)])

    def per_sample_score(self, theta, x, y):
        return self.per_sample_scores(theta, np.asarray(x, dtype=np.float64)[None, :], [y])[0]


def build_model(spec: ModelSpec) -> Model:
    return Model(spec)


def init_params(spec: ModelSpec):
    return Model(spec).init_params()

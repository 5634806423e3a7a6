"""Shift-gated sequential adaptation with a Fisher-weighted anchor, plus the
ERM-continue and EWC baselines run under the same harness.

One step of the ``fade`` method on batch ``t``:

1. estimate the diagonal Fisher ``I_t`` at the current parameters on the batch;
2. for ``t >= 1`` compute the shift signal against the previous batch;
3. if the signal fired (or ``t == 0``, warmup, or ``always_train``), anchor at the
   current parameters, minimize cross-entropy plus
   ``lam * sum(I_global * (theta - anchor)**2)`` from a warm start, then fold
   ``I_t`` into ``I_global`` by exponential smoothing;
4. otherwise leave parameters and ``I_global`` untouched.

Only the previous batch's moments and Fisher diagonal survive between steps.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import minimize

from . import detector as det
from .data_stream import FeatureBatch
from .detector import DetectorConfig, DetectorState, ShiftSignal
from .divergence import BatchStats, bin_edges_from, delta_scs, summarize
from .errors import DataError, SequencingError
from .fisher import DiagonalFim, ema_update, estimate_fim
from .metrics import accuracy, forgetting, regret_series
from .models import Model, ModelSpec

METHODS = ("fade", "erm_continue", "ewc")


class AdapterConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    alpha: float = Field(default=0.9, ge=0, le=1)
    lam: float = Field(default=1.0, ge=0, alias="lambda")
    epochs_per_batch: int = Field(default=5, ge=1)
    learning_rate: float = Field(default=0.05, gt=0)
    optimizer: Literal["sgd", "adaptive_moment"] = "sgd"
    # None trains on the full batch at every step
    batch_size: Optional[int] = Field(default=32, ge=1)
    lr_schedule: Literal["constant", "inverse_time"] = "constant"
    lr_decay_batches: float = Field(default=10.0, gt=0)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    always_train: bool = False
    # train on every batch of the calibration prefix, before gamma exists
    warmup_train: bool = True
    # ablation: fold I_t into I_global before optimizing instead of after
    ema_before_optimize: bool = False
    fim_subsample: int = Field(default=256, ge=1)
    fim_epsilon: float = Field(default=1e-4, ge=0)
    seed: int = 0


# ---------------------------------------------------------------------------
# objective and optimizer


def regularized_loss(model: Model, theta, X, y, mu, fim_diag, lam):
    """Cross-entropy plus ``lam * sum(fim_diag * (theta - mu)**2)`` and its gradient."""
    loss, grad = model.nll_and_grad(theta, X, y)
    if lam == 0 or mu is None:
        return loss, grad
    diff = theta - mu
    weighted = fim_diag * diff
    return loss + lam * float(diff @ weighted), grad + 2.0 * lam * weighted


def proximal_loss(model: Model, theta, X, y, anchor, mu_prox):
    """Cross-entropy plus the isotropic ``mu_prox / 2 * ||theta - anchor||^2`` term."""
    loss, grad = model.nll_and_grad(theta, X, y)
    if mu_prox == 0:
        return loss, grad
    diff = theta - anchor
    return loss + 0.5 * mu_prox * float(diff @ diff), grad + mu_prox * diff


def step_size(cfg: AdapterConfig, t):
    if cfg.lr_schedule == "inverse_time":
        return cfg.learning_rate / (1.0 + t / cfg.lr_decay_batches)
    return cfg.learning_rate


def optimize(objective, theta0, X, y, *, epochs, lr, batch_size=None, optimizer="sgd", seed=0,
             penalty=None):
    """Minibatch first-order minimization of ``objective(theta, Xb, yb) -> (loss, grad)``.

    ``penalty=(c, anchor)`` adds ``sum(c * (theta - anchor)**2)`` to the
    objective.  Under SGD it is applied as the exact proximal step of that
    diagonal quadratic, which is stable for any ``c`` (a plain gradient step
    diverges once ``2 * lr * c > 2``); under adaptive moments its gradient is
    added to the minibatch gradient.

    Shuffles are drawn from ``seed`` so that runs sharing a seed see the same
    minibatch sequence regardless of the objective.
    """
    theta = np.array(theta0, dtype=np.float64, copy=True)
    n = X.shape[0]
    bs = n if batch_size is None else min(batch_size, n)
    rng = np.random.default_rng(seed)
    if penalty is not None:
        c, anchor = penalty
        c = np.broadcast_to(np.asarray(c, dtype=np.float64), theta.shape)
        shrink = 1.0 + 2.0 * lr * c
        pull = 2.0 * lr * c * anchor
    m = v = None
    if optimizer == "adaptive_moment":
        m, v = np.zeros_like(theta), np.zeros_like(theta)
    k = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            _, g = objective(theta, X[idx], y[idx])
            if optimizer == "sgd":
                theta = theta - lr * g
                if penalty is not None:
                    theta = (theta + pull) / shrink
            else:
                if penalty is not None:
                    g = g + 2.0 * c * (theta - anchor)
                k += 1
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                theta = theta - lr * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    return theta


def fisher_penalty(lam, weights, anchor):
    """``penalty`` argument of :func:`optimize` for the Fisher-weighted anchor."""
    if lam == 0 or weights is None:
        return None
    return lam * weights, anchor


def _train_seed(cfg, t):
    return [cfg.seed, t, 1]


def _fim_seed(cfg, t):
    return [cfg.seed, t, 2]


# ---------------------------------------------------------------------------
# state


@dataclass
class AdapterState:
    theta: np.ndarray
    mu: np.ndarray
    I_global: DiagonalFim
    I_prev: Optional[DiagonalFim] = None
    prev_stats: Optional[BatchStats] = None
    edges: Optional[np.ndarray] = None
    t: int = -1
    detector: DetectorState = field(default_factory=DetectorState)


def init_state(model: Model, cfg: AdapterConfig, theta0=None) -> AdapterState:
    theta = model.init_params() if theta0 is None else np.array(theta0, dtype=np.float64)
    return AdapterState(theta=theta, mu=theta.copy(),
                        I_global=DiagonalFim.initial(model.n_params, cfg.fim_epsilon))


def _check_order(state, batch):
    if batch.index != state.t + 1:
        raise SequencingError(f"expected batch {state.t + 1}, got batch {batch.index}")


def _stats_for(state, batch, cfg):
    edges = state.edges
    if edges is None and cfg.detector.estimator == "histogram":
        edges = bin_edges_from(batch.features)
    return summarize(batch.features, edges), edges


def _report(model, theta, batch, trained, t0):
    train_loss = model.nll(theta, batch.features, batch.labels)
    held_loss = model.nll(theta, batch.heldout_features, batch.heldout_labels)
    acc = accuracy(model.predict(theta, batch.heldout_features), batch.heldout_labels)
    return {"trained": trained, "train_loss": train_loss, "heldout_loss": held_loss,
            "heldout_acc_current": acc, "wall_ms": (time.perf_counter() - t0) * 1e3}


def fade_step(state: AdapterState, batch: FeatureBatch, cfg: AdapterConfig, model: Model):
    """Process one batch; returns ``(new_state, signal or None, report)``."""
    t0 = time.perf_counter()
    _check_order(state, batch)
    t = batch.index
    curr_stats, edges = _stats_for(state, batch, cfg)
    I_t = estimate_fim(model, state.theta, batch.features, batch.labels,
                       cfg.fim_subsample, _fim_seed(cfg, t))
    signal, dstate = None, state.detector
    if t >= 1:
        signal, dstate = det.observe(cfg.detector, state.detector, state.prev_stats,
                                     curr_stats, state.I_prev, I_t, t)
    warm = t >= 1 and cfg.warmup_train and det.in_warmup(cfg.detector, state.detector)
    train = t == 0 or cfg.always_train or warm or (signal is not None and signal.fired)

    theta, mu, I_global = state.theta, state.mu, state.I_global
    if train:
        mu = state.theta.copy()
        if cfg.ema_before_optimize:
            I_global = ema_update(I_global, I_t, cfg.alpha)
        theta = optimize(model.nll_and_grad, state.theta, batch.features, batch.labels,
                         epochs=cfg.epochs_per_batch, lr=step_size(cfg, t),
                         batch_size=cfg.batch_size, optimizer=cfg.optimizer,
                         seed=_train_seed(cfg, t),
                         penalty=fisher_penalty(cfg.lam, I_global.diag, mu))
        if not cfg.ema_before_optimize:
            I_global = ema_update(I_global, I_t, cfg.alpha)

    new = AdapterState(theta=theta, mu=mu, I_global=I_global, I_prev=I_t,
                       prev_stats=curr_stats, edges=edges, t=t, detector=dstate)
    return new, signal, _report(model, theta, batch, train, t0)


def erm_step(state: AdapterState, batch: FeatureBatch, cfg: AdapterConfig, model: Model):
    """Plain cross-entropy on every batch, warm-started."""
    t0 = time.perf_counter()
    _check_order(state, batch)
    t = batch.index
    curr_stats, edges = _stats_for(state, batch, cfg)
    signal = _kl_only_signal(state, curr_stats, cfg, t)

    theta = optimize(model.nll_and_grad, state.theta, batch.features, batch.labels,
                     epochs=cfg.epochs_per_batch, lr=step_size(cfg, t),
                     batch_size=cfg.batch_size, optimizer=cfg.optimizer,
                     seed=_train_seed(cfg, t))
    new = replace(state, theta=theta, mu=state.theta.copy(), prev_stats=curr_stats,
                  edges=edges, t=t)
    return new, signal, _report(model, theta, batch, True, t0)


def ewc_step(state: AdapterState, batch: FeatureBatch, cfg: AdapterConfig, model: Model):
    """EWC with every batch treated as a task boundary.

    The penalty uses the Fisher of the previous batch at the parameters
    reached after training on it, anchored at those parameters; there is no
    smoothing across batches.  Batch 0 has no anchor and trains as ERM.
    """
    t0 = time.perf_counter()
    _check_order(state, batch)
    t = batch.index
    curr_stats, edges = _stats_for(state, batch, cfg)
    signal = _kl_only_signal(state, curr_stats, cfg, t)
    mu = state.theta.copy()
    weights = None if state.I_prev is None else state.I_prev.diag

    theta = optimize(model.nll_and_grad, state.theta, batch.features, batch.labels,
                     epochs=cfg.epochs_per_batch, lr=step_size(cfg, t),
                     batch_size=cfg.batch_size, optimizer=cfg.optimizer,
                     seed=_train_seed(cfg, t), penalty=fisher_penalty(cfg.lam, weights, mu))
    I_end = estimate_fim(model, theta, batch.features, batch.labels,
                         cfg.fim_subsample, _fim_seed(cfg, t))
    new = replace(state, theta=theta, mu=mu, I_global=I_end, I_prev=I_end,
                  prev_stats=curr_stats, edges=edges, t=t)
    return new, signal, _report(model, theta, batch, True, t0)


def _kl_only_signal(state, curr_stats, cfg, t):
    """Shift magnitude for logging; baselines never gate on it."""
    if t < 1:
        return None
    kl = delta_scs(state.prev_stats, curr_stats, cfg.detector.estimator)
    return ShiftSignal(t, kl, float("nan"), float("nan"), False,
                       det.grade_severity(kl, cfg.detector.severity_edges), None)


STEPS = {"fade": fade_step, "erm_continue": erm_step, "ewc": ewc_step}


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunLog:
    method: str
    records: list
    summary: dict
    theta: np.ndarray
    accuracy_matrix: np.ndarray

    def deterministic_view(self):
        """Records and summary with wall-clock fields removed."""
        recs = [{k: v for k, v in r.items() if k != "wall_ms"} for r in self.records]
        summ = {k: v for k, v in self.summary.items() if k != "wall_ms_total"}
        return recs, summ

    def to_jsonl(self):
        lines = [json.dumps(_jsonable(r), sort_keys=True) for r in self.records]
        lines.append(json.dumps(_jsonable({"summary": self.summary}), sort_keys=True))
        return "\n".join(lines) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return None if not np.isfinite(f) else f
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def param_checksum(theta):
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()


def fit_hindsight(model: Model, X, y, theta0=None, iterations=200):
    """Offline comparator: L-BFGS on pooled data, capped at ``iterations``."""
    x0 = model.init_params() if theta0 is None else theta0
    res = minimize(lambda th: model.nll_and_grad(th, X, y), x0, jac=True,
                   method="L-BFGS-B", options={"maxiter": iterations})
    return res.x


def run_sequential(stream, model_spec: ModelSpec, method: str, cfg: AdapterConfig,
                   theta_star=None, track_regret=True, theta0=None) -> RunLog:
    """Process ``stream`` strictly in order with one method.

    Heldout splits of every seen batch are kept for evaluation only (the
    accuracy matrix and the regret comparator); training never revisits
    raw rows of earlier batches.
    """
    if method not in STEPS:
        raise DataError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    step = STEPS[method]
    model = Model(model_spec)
    state = init_state(model, cfg, theta0)
    heldout = []
    records, online_losses, rows = [], [], []
    for batch in stream:
        online_losses.append(model.nll(state.theta, batch.heldout_features, batch.heldout_labels))
        state, signal, report = step(state, batch, cfg, model)
        heldout.append((batch.heldout_features, batch.heldout_labels))
        del batch
        row = [accuracy(model.predict(state.theta, Xh), yh) for Xh, yh in heldout]
        rows.append(row)
        rec = {
            "t": state.t, "method": method,
            "fired": bool(signal.fired) if signal else None,
            "tau": signal.tau if signal else None,
            "kl": signal.kl if signal else None,
            "fim_dist": signal.fim_dist if signal else None,
            "severity": signal.severity if signal else None,
            "gamma_in_effect": signal.gamma_in_effect if signal else None,
            "trained": report["trained"],
            "train_loss": report["train_loss"],
            "heldout_loss": report["heldout_loss"],
            "heldout_acc_current": report["heldout_acc_current"],
            "heldout_acc_matrix_row": row,
            "online_loss": online_losses[-1],
            "wall_ms": report["wall_ms"],
        }
        if theta_star is not None:
            rec["param_dist"] = float(np.linalg.norm(state.theta - theta_star))
        records.append(rec)
    if not records:
        raise DataError("stream yielded no batches")
    T = len(rows)
    A = np.full((T, T), np.nan)
    for s, row in enumerate(rows):
        A[s, :len(row)] = row
    max_kl = float(max((r["kl"] for r in records if r["kl"] is not None), default=0.0))
    summary = {
        "method": method,
        "T": T,
        "final_avg_acc": float(np.mean(A[T - 1])),
        "mean_current_acc": float(np.mean(np.diag(A))),
        "forgetting": forgetting(A) if T >= 2 else 0.0,
        "fired_fraction": float(np.mean([bool(r["fired"]) for r in records[1:]])) if T > 1 else 0.0,
        "trained_fraction": float(np.mean([r["trained"] for r in records])),
        "max_kl": max_kl,
        # run-level severity: the grade of the largest batch-to-batch shift
        "regime": det.grade_severity(max_kl, cfg.detector.severity_edges),
        "param_checksum": param_checksum(state.theta),
        "wall_ms_total": float(sum(r["wall_ms"] for r in records)),
    }
    if track_regret:
        Xp = np.concatenate([h[0] for h in heldout])
        yp = np.concatenate([h[1] for h in heldout])
        hind = fit_hindsight(model, Xp, yp)
        hind_losses = [model.nll(hind, Xh, yh) for Xh, yh in heldout]
        R, avg = regret_series(online_losses, hind_losses)
        for rec, h, r, a in zip(records, hind_losses, R, avg):
            rec["hindsight_loss"] = h
            rec["regret"] = r
            rec["regret_avg"] = a
        summary["regret"] = float(R[-1])
        summary["regret_avg"] = float(avg[-1])
    return RunLog(method, records, summary, state.theta, A)

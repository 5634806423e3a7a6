"""Federated simulation: clients hold non-i.i.d. shards of one table.

Each round the server broadcasts its parameters, a seeded subset of clients
trains locally, and the server applies the sample-weighted mean of the
returned deltas.  Three local objectives are available:

``fedavg``    plain cross-entropy
``fedprox``   cross-entropy plus ``mu_prox / 2 * ||theta - theta_server||^2``
``fade_fed``  cross-entropy plus the Fisher-weighted anchor at ``theta_server``

For ``fade_fed`` the server keeps a smoothed global Fisher diagonal.  Clients
are visited in a shuffled order and each one's shift signal is computed
against the previously visited client.  Every client trains, but only
clients whose signal fires (or any client while the threshold is still being
calibrated) contribute their Fisher diagonal to the smoothed estimate.

Clients send only parameter deltas, Fisher diagonals and feature moments;
:attr:`FedRunLog.messages` records exactly that traffic.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import detector as det
from .adapter import AdapterConfig, fisher_penalty, optimize
from .data_stream import FeatureBatch, LabeledTable, _split_heldout
from .detector import DetectorState
from .divergence import BatchStats, delta_scs, summarize
from .errors import ConfigError, DataError
from .fisher import DiagonalFim, ema_update, estimate_fim, fim_distance
from .metrics import accuracy
from .models import Model, ModelSpec

FED_METHODS = ("fedavg", "fedprox", "fade_fed")
MESSAGE_FIELDS = frozenset({"round", "client_id", "n_k", "delta", "fim", "stats"})


class FedConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    rounds: int = Field(default=50, ge=1)
    clients_per_round: int = Field(default=4, ge=1)
    local_epochs: int = Field(default=1, ge=1)
    learning_rate: float = Field(default=0.05, gt=0)
    batch_size: Optional[int] = Field(default=32, ge=1)
    optimizer: Literal["sgd", "adaptive_moment"] = "sgd"
    method: Literal["fedavg", "fedprox", "fade_fed"] = "fedavg"
    mu_prox: float = Field(default=0.01, ge=0)
    fade: AdapterConfig = Field(default_factory=AdapterConfig)
    seed: int = 0


@dataclass(eq=False)
class ClientShard:
    client_id: int
    data: FeatureBatch
    n_k: int
    # source-table rows held by this client (train and heldout)
    rows: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# data


def gaussian_table(n, d_x=2, n_classes=2, separation=2.0, seed=0) -> LabeledTable:
    """Equal-prior Gaussian classes with unit variance, means spread over (x0, x1)."""
    if n_classes > 2 and d_x < 2:
        raise ConfigError("d_x", "multiclass data needs at least 2 features")
    rng = np.random.default_rng([seed, 31])
    y = rng.integers(0, n_classes, size=n)
    means = np.zeros((n_classes, d_x))
    if n_classes == 2:
        means[:, 0] = [-separation / 2, separation / 2]
    else:
        ang = 2 * np.pi * np.arange(n_classes) / n_classes
        means[:, 0] = separation / 2 * np.cos(ang)
        means[:, 1] = separation / 2 * np.sin(ang)
    X = means[y] + rng.standard_normal((n, d_x))
    names = [f"x{j}" for j in range(d_x)]
    return LabeledTable(X, y.astype(np.int64), list(range(n_classes)), np.zeros(d_x),
                        np.ones(d_x), names)


def _label_skew_groups(y, K, concentration, rng):
    groups = [[] for _ in range(K)]
    for c in np.unique(y):
        pool = np.flatnonzero(y == c)
        pool = pool[rng.permutation(len(pool))]
        share = rng.dirichlet(np.full(K, concentration))
        cuts = (np.cumsum(share)[:-1] * len(pool)).astype(int)
        for k, part in enumerate(np.split(pool, cuts)):
            groups[k].append(part)
    return [np.sort(np.concatenate(g)) for g in groups]


def partition_clients(table: LabeledTable, K: int, skew: str = "label_skew",
                      concentration: float = 0.1, seed: int = 0, *,
                      offset_scale: float = 1.0, max_tries: int = 100) -> list:
    """Split a table into ``K`` disjoint, exhaustive client shards.

    ``label_skew`` splits every class across clients with Dirichlet
    proportions; ``iid`` deals shuffled rows round-robin; ``feature_skew``
    deals rows like ``iid`` and then offsets and rotates each client's
    features by a client-specific amount.  Label-skew draws are retried until
    every client holds at least 4 rows.
    """
    X, y = table.features, table.labels
    n = X.shape[0]
    if K < 2:
        raise ConfigError("K", "at least 2 clients are required")
    if concentration <= 0:
        raise ConfigError("concentration", "must be > 0")
    if n < 4 * K:
        raise DataError(f"infeasible partition: {n} rows cannot give {K} clients 4 rows each")
    if skew == "label_skew":
        for attempt in range(max_tries):
            groups = _label_skew_groups(y, K, concentration, np.random.default_rng([seed, attempt]))
            if min(len(g) for g in groups) >= 4:
                break
        else:
            raise DataError(f"infeasible partition: no Dirichlet({concentration}) draw in "
                            f"{max_tries} tries gave every one of {K} clients 4 rows")
    elif skew in ("iid", "feature_skew"):
        perm = np.random.default_rng([seed, 0]).permutation(n)
        groups = [np.sort(perm[k::K]) for k in range(K)]
    else:
        raise ConfigError("skew", f"unknown skew {skew!r}")

    split_rng = np.random.default_rng([seed, 65537])
    skew_rng = np.random.default_rng([seed, 8191])
    shards = []
    for k, rows in enumerate(groups):
        train, held = _split_heldout(rows, split_rng)
        Xt, Xh = X[train].copy(), X[held].copy()
        if skew == "feature_skew":
            offset = offset_scale * skew_rng.standard_normal(X.shape[1])
            Xt, Xh = Xt + offset, Xh + offset
            if X.shape[1] >= 2:
                a = skew_rng.uniform(-np.pi / 4, np.pi / 4)
                R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
                Xt[:, :2] = Xt[:, :2] @ R.T
                Xh[:, :2] = Xh[:, :2] @ R.T
        batch = FeatureBatch(k, Xt, y[train], Xh, y[held], table.n_classes,
                             train_rows=train, heldout_rows=held)
        shards.append(ClientShard(k, batch, len(train), rows))
    return shards


# ---------------------------------------------------------------------------
# signal


def client_tau(I_client: DiagonalFim, I_prev_client: DiagonalFim, stats_client: BatchStats,
               stats_prev: BatchStats, estimator: str = "gaussian") -> float:
    """Composite shift signal between two consecutively visited clients."""
    return delta_scs(stats_prev, stats_client, estimator) * fim_distance(I_client, I_prev_client)


# ---------------------------------------------------------------------------
# simulation


@dataclass
class FedRunLog:
    method: str
    rounds: list
    messages: list = field(default_factory=list)
    theta: Optional[np.ndarray] = None

    @property
    def final_acc(self):
        return self.rounds[-1]["pooled_heldout_acc"]

    def deterministic_view(self):
        return [{k: v for k, v in r.items() if k != "wall_ms"} for r in self.rounds]

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rounds)


def _local_penalty(cfg: FedConfig, anchor, weights):
    """Quadratic pull toward the server model used by each method's local objective."""
    if cfg.method == "fedprox":
        # (mu_prox / 2) * ||theta - anchor||^2
        return None if cfg.mu_prox == 0 else (0.5 * cfg.mu_prox, anchor)
    if cfg.method == "fade_fed":
        return fisher_penalty(cfg.fade.lam, weights, anchor)
    return None


def run_federated(shards, model_spec: ModelSpec, cfg: FedConfig, theta0=None) -> FedRunLog:
    """Simulate ``cfg.rounds`` rounds; returns per-round records and the message log."""
    if not shards:
        raise DataError("no client shards")
    ids = [s.client_id for s in shards]
    if len(set(ids)) != len(ids):
        raise DataError("client ids must be unique")
    if cfg.clients_per_round > len(shards):
        raise ConfigError("clients_per_round",
                          f"{cfg.clients_per_round} exceeds the {len(shards)} available clients")
    by_id = {s.client_id: s for s in shards}
    model = Model(model_spec)
    theta = model.init_params() if theta0 is None else np.array(theta0, dtype=np.float64)
    fcfg = cfg.fade
    I_global = DiagonalFim.initial(model.n_params, fcfg.fim_epsilon)
    dstate = DetectorState()
    prev = None  # (fim, stats) of the last visited client
    Xh = np.concatenate([s.data.heldout_features for s in shards])
    yh = np.concatenate([s.data.heldout_labels for s in shards])

    rounds, messages = [], []
    for r in range(cfg.rounds):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, r])
        chosen = rng.choice(sorted(ids), size=cfg.clients_per_round, replace=False)
        order = [int(c) for c in chosen[rng.permutation(len(chosen))]]
        penalty = _local_penalty(cfg, theta, I_global.diag)
        replies, taus, fires = {}, [], []
        for cid in order:
            shard = by_id[cid]
            b = shard.data
            local = optimize(model.nll_and_grad, theta, b.features, b.labels, epochs=cfg.local_epochs,
                             lr=cfg.learning_rate, batch_size=cfg.batch_size,
                             optimizer=cfg.optimizer, seed=[cfg.seed, r, cid], penalty=penalty)
            msg = {"round": r, "client_id": cid, "n_k": shard.n_k, "delta": local - theta}
            if cfg.method == "fade_fed":
                I_k = estimate_fim(model, theta, b.features, b.labels, fcfg.fim_subsample,
                                   [cfg.seed, r, cid, 2])
                stats = summarize(b.features)
                include = True
                if prev is not None:
                    warm = det.in_warmup(fcfg.detector, dstate)
                    sig, dstate = det.observe(fcfg.detector, dstate, prev[1], stats, prev[0],
                                              I_k, len(dstate.tau_history) + 1)
                    taus.append(sig.tau)
                    fires.append(sig.fired)
                    include = warm or sig.fired
                prev = (I_k, stats)
                msg["fim"] = I_k
                msg["stats"] = stats
                msg["include_fim"] = include
            replies[cid] = msg

        total = sum(m["n_k"] for m in replies.values())
        step = np.zeros_like(theta)
        for cid in sorted(replies):
            m = replies[cid]
            step += (m["n_k"] / total) * m["delta"]
        theta = theta + step
        if cfg.method == "fade_fed":
            used = [replies[c] for c in sorted(replies) if replies[c].pop("include_fim")]
            if used:
                n_used = sum(m["n_k"] for m in used)
                diag = sum((m["n_k"] / n_used) * m["fim"].diag for m in used)
                I_global = ema_update(I_global, DiagonalFim(diag, sum(m["fim"].sample_count for m in used)),
                                      fcfg.alpha)
        messages.extend(replies[c] for c in sorted(replies))

        acc = accuracy(model.predict(theta, Xh), yh)
        rounds.append({
            "round": r,
            "method": cfg.method,
            "participating_clients": sorted(replies),
            "pooled_heldout_acc": acc,
            "mean_client_tau": float(np.mean(taus)) if taus else None,
            "fired_fraction": float(np.mean(fires)) if fires else None,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        })
    return FedRunLog(cfg.method, rounds, messages, theta)

"""Canonical benchmark streams and run helpers shared by the CLI and the test suite."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .adapter import AdapterConfig, RunLog, run_sequential
from .data_stream import StreamSpec, bayes_logit_params, generate_stream
from .federated import FedConfig, FedRunLog, gaussian_table, partition_clients, run_federated
from .models import ModelSpec

# ---------------------------------------------------------------------------
# detector operating point: 2-sigma mean jumps on a nuisance feature

DETECTOR_JUMPS = (13, 20, 27, 34, 41)


def detector_stream(seed, T=50, n_per_batch=1000, d_x=16, jumps=DETECTOR_JUMPS, magnitude=2.0):
    # jumps alternate direction so the offset stays within one jump of the base
    return StreamSpec(kind="synthetic_mean_drift", T=T, n_per_batch=n_per_batch, d_x=d_x,
                      shift_schedule=[(j, magnitude) for j in jumps], seed=seed,
                      alternate_drift=True)


def precision_recall(fired_by_seed: Iterable, injected, tolerance=1):
    """Pooled precision and recall of fire times against injected shift indices.

    A fire is a hit when it lies within ``tolerance`` batches of an injection;
    an injection is recalled when at least one fire lies that close.
    """
    tp = fp = recalled = total = 0
    for fired in fired_by_seed:
        fired = list(fired)
        for t in fired:
            if any(abs(t - i) <= tolerance for i in injected):
                tp += 1
            else:
                fp += 1
        recalled += sum(any(abs(t - i) <= tolerance for t in fired) for i in injected)
        total += len(injected)
    precision = tp / (tp + fp) if tp + fp else 0.0
    return precision, recalled / total if total else 0.0


# ---------------------------------------------------------------------------
# rotating-Gaussian benchmark
#
# Four equal-variance classes sit on a circle of radius 3; a narrow selection
# window straddling the class-0/class-1 boundary picks where the data lives
# and the rotation schedule carries that window around the circle.  A softmax
# model is well specified for every batch, so old regions stay learnable and
# any loss on them is forgetting.

ROTATION_SHIFTS = (11, 18, 25, 32)
ROTATION_STEPS = {"mild": (0.01, 0.02, 0.03), "moderate": (0.15, 0.2, 0.25),
                  "severe": (0.4, 0.8, 1.2)}
SEVERE_STEP = 0.8


def rotation_stream(seed, step=SEVERE_STEP, T=40, shifts=ROTATION_SHIFTS, n_per_batch=200):
    return StreamSpec(kind="synthetic_rotation", T=T, n_per_batch=n_per_batch, d_x=2,
                      n_classes=4, concept="linear", separation=6.0, window_radius=3.0,
                      window_width=0.6, window_angle=math.pi / 4, labels="argmax",
                      shift_schedule=[(i, step) for i in shifts], seed=seed)


def rotation_model():
    return ModelSpec(arch="logistic", d_x=2, n_classes=4)


def rotation_adapter(seed, **overrides):
    return AdapterConfig(seed=seed, epochs_per_batch=20, **overrides)


def run_rotation(method, seed, step=SEVERE_STEP) -> RunLog:
    return run_sequential(generate_stream(rotation_stream(seed, step)), rotation_model(),
                          method, rotation_adapter(seed), track_regret=False)


# ---------------------------------------------------------------------------
# theorem monitors: stationary, well-specified logistic stream


def stationary_stream(seed, T=200, n_per_batch=200, d_x=2):
    return StreamSpec(kind="synthetic_mean_drift", T=T, n_per_batch=n_per_batch, d_x=d_x,
                      seed=seed)


def run_stationary(seed, T=200) -> RunLog:
    spec = stationary_stream(seed, T)
    cfg = AdapterConfig(seed=seed, always_train=True, lr_schedule="inverse_time")
    return run_sequential(generate_stream(spec), ModelSpec(arch="logistic", d_x=spec.d_x),
                          "fade", cfg, theta_star=bayes_logit_params(spec))


def trend_slope(values, x=None):
    values = np.asarray(values, dtype=np.float64)
    x = np.arange(values.size) if x is None else np.asarray(x, dtype=np.float64)
    return float(np.polyfit(x, values, 1)[0])


def loglog_slope(T_values, distances):
    return trend_slope(np.log(distances), np.log(T_values))


# ---------------------------------------------------------------------------
# tabular protocol

TABULAR_ADAPTER = dict(epochs_per_batch=20, optimizer="adaptive_moment", learning_rate=0.05)
TABULAR_T = 20
TABULAR_SORT_COLUMN = 1


# ---------------------------------------------------------------------------
# federated label skew


def federated_shards(seed, K=8, concentration=0.1, n=2000, d_x=2):
    return partition_clients(gaussian_table(n, d_x, seed=seed), K, "label_skew",
                             concentration, seed=seed)


def federated_config(method, seed, **overrides):
    base = dict(rounds=50, clients_per_round=4, local_epochs=20, learning_rate=0.05,
                method=method, seed=seed)
    base.update(overrides)
    return FedConfig(**base)


def run_federated_benchmark(method, seed, **overrides) -> FedRunLog:
    shards = federated_shards(seed)
    return run_federated(shards, ModelSpec(arch="logistic", d_x=2),
                         federated_config(method, seed, **overrides))

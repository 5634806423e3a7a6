"""Temporally ordered batch streams: synthetic generators and tabular fragmentation.

Synthetic streams share one construction.  A fixed labeling rule (the
posterior of a Gaussian class mixture, the *concept*) is chosen once.
Feature rows for batch ``t`` are sampled from a base distribution, passed
through the batch's transformation (translation, rotation, masking or a
class-prior tilt), and only then labeled by the rule.  The conditional law
``P(y|x)`` is therefore identical at every ``t``; only ``P(x)`` moves, and
only at the indices listed in the shift schedule.
"""
from __future__ import annotations

import csv
import math
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError, DataError

HELDOUT_FRACTION = 0.25


class _BatchLedger:
    """Counts live :class:`FeatureBatch` objects; used to audit the memory contract."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def _acquire(self):
        self.live += 1
        self.peak = max(self.peak, self.live)

    def _release(self):
        self.live -= 1

    def reset_peak(self):
        self.peak = self.live


BATCH_LEDGER = _BatchLedger()


@dataclass(eq=False)
class FeatureBatch:
    index: int
    features: np.ndarray
    labels: np.ndarray
    heldout_features: np.ndarray
    heldout_labels: np.ndarray
    n_classes: int
    # source-row bookkeeping for fragmented tables (None for synthetic rows)
    train_rows: Optional[np.ndarray] = None
    heldout_rows: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.heldout_features = np.asarray(self.heldout_features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.heldout_labels = np.asarray(self.heldout_labels, dtype=np.int64)
        if self.index < 0:
            raise DataError("batch index must be nonnegative")
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError("a batch needs at least one training row")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels do not match training rows")
        if self.heldout_features.ndim != 2 or self.heldout_features.shape[1] != self.features.shape[1]:
            raise DataError("heldout rows must have the training dimensionality")
        if self.heldout_labels.shape != (self.heldout_features.shape[0],):
            raise DataError("heldout labels do not match heldout rows")
        for lab in (self.labels, self.heldout_labels):
            if lab.size and (lab.min() < 0 or lab.max() >= self.n_classes):
                raise DataError(f"labels must lie in 0..{self.n_classes - 1}")
        BATCH_LEDGER._acquire()
        weakref.finalize(self, BATCH_LEDGER._release)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d_x(self):
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# specs


class StreamSpec(BaseModel):
    """Serializable description of a batch stream."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal[
        "synthetic_mean_drift",
        "synthetic_rotation",
        "feature_mask",
        "class_imbalance",
        "tabular_fragment",
    ]
    T: int = Field(ge=2)
    n_per_batch: int = Field(default=200, ge=4)
    d_x: int = Field(default=4, ge=1)
    shift_schedule: list[tuple[int, float]] = Field(default_factory=list)
    seed: int = 0

    n_classes: int = Field(default=2, ge=2)
    concept: Optional[Literal["linear", "ring"]] = None
    separation: float = Field(default=2.0, gt=0)
    scale_ratio: float = Field(default=2.0, gt=1)
    window_width: float = Field(default=0.7, gt=0)
    window_radius: Optional[float] = Field(default=None, gt=0)
    # polar angle of the window centre in the (x0, x1) plane
    window_angle: float = 0.0
    labels: Literal["sample", "argmax"] = "sample"
    # successive mean-drift jumps flip direction, keeping the offset bounded
    alternate_drift: bool = False

    csv_path: Optional[str] = None
    label_column: int = -1
    has_header: bool = False
    protocol: Literal["feature_mask", "imbalance", "sorted_feature"] = "sorted_feature"
    sort_column: int = 0

    @model_validator(mode="after")
    def _check(self):
        for i, (idx, mag) in enumerate(self.shift_schedule):
            if not 1 <= idx <= self.T - 1:
                raise ValueError(f"shift_schedule[{i}]: index {idx} outside [1, T-1={self.T - 1}]")
            if mag < 0 or not math.isfinite(mag):
                raise ValueError(f"shift_schedule[{i}]: magnitude must be a finite value >= 0")
        concept = self.resolved_concept
        if self.kind == "synthetic_rotation" and self.d_x < 2:
            raise ValueError("d_x: rotation needs at least 2 features")
        if concept == "ring" and self.d_x < 2:
            raise ValueError("d_x: ring concept needs at least 2 features")
        if self.window_radius is not None and self.d_x < 2:
            raise ValueError("d_x: a selection window needs at least 2 features")
        if concept == "linear" and self.n_classes > 2 and self.d_x < 2:
            raise ValueError("d_x: multiclass concept needs at least 2 features")
        if self.kind == "synthetic_mean_drift" and self.d_x <= _concept_dims(self):
            raise ValueError("d_x: mean drift needs a feature outside the concept dimensions")
        if self.kind == "tabular_fragment" and not self.csv_path:
            raise ValueError("csv_path: required for tabular_fragment streams")
        return self

    @property
    def resolved_concept(self):
        if self.concept is not None:
            return self.concept
        return "ring" if self.kind == "synthetic_rotation" else "linear"


def _concept_dims(spec):
    if spec.resolved_concept == "ring" or spec.n_classes > 2:
        return 2
    return 1


# ---------------------------------------------------------------------------
# labeling rule


@dataclass(frozen=True)
class GaussianConcept:
    """Posterior of a diagonal Gaussian class mixture, used as the fixed labeling rule."""

    means: np.ndarray   # C x d
    scales: np.ndarray  # C x d, per-class per-feature std
    priors: np.ndarray  # C

    def log_joint(self, X):
        X = np.asarray(X, dtype=np.float64)
        z = (X[:, None, :] - self.means[None]) / self.scales[None]
        return (np.log(self.priors)[None]
                - np.log(self.scales).sum(axis=1)[None]
                - 0.5 * (z * z).sum(axis=2))

    def posterior(self, X):
        lj = self.log_joint(X)
        lj -= lj.max(axis=1, keepdims=True)
        p = np.exp(lj)
        return p / p.sum(axis=1, keepdims=True)

    def label(self, X, rng, mode="sample"):
        post = self.posterior(X)
        if mode == "argmax":
            return np.argmax(post, axis=1)
        u = rng.random(len(post))
        return np.minimum((post.cumsum(axis=1) < u[:, None]).sum(axis=1), post.shape[1] - 1)


def labeling_rule(spec: StreamSpec) -> GaussianConcept:
    C, d = spec.n_classes, spec.d_x
    means = np.zeros((C, d))
    scales = np.ones((C, d))
    if spec.resolved_concept == "ring":
        scales[:, :2] = (spec.scale_ratio ** np.arange(C))[:, None]
    elif C == 2:
        means[0, 0], means[1, 0] = -spec.separation / 2, spec.separation / 2
    else:
        ang = 2 * np.pi * np.arange(C) / C
        means[:, 0] = spec.separation / 2 * np.cos(ang)
        means[:, 1] = spec.separation / 2 * np.sin(ang)
    return GaussianConcept(means, scales, np.full(C, 1.0 / C))


def ring_radius(spec: StreamSpec):
    """Radius where the posteriors of classes 0 and 1 of the ring concept cross."""
    s0, s1 = 1.0, spec.scale_ratio
    return math.sqrt(4 * math.log(s1 / s0) / (1 / s0 ** 2 - 1 / s1 ** 2))


def bayes_logit_params(spec: StreamSpec):
    """Exact logistic parameters ``[w, b]`` of a binary linear concept.

    For equal unit-variance classes the posterior log-odds are affine in x,
    so a logistic model is well specified and this is its population optimum
    on any stationary stream.
    """
    if spec.resolved_concept != "linear" or spec.n_classes != 2:
        raise ConfigError("concept", "closed-form logit parameters exist only for the binary linear concept")
    rule = labeling_rule(spec)
    m0, m1 = rule.means
    w = m1 - m0
    b = 0.5 * (m0 @ m0 - m1 @ m1) + math.log(rule.priors[1] / rule.priors[0])
    return np.concatenate([w, [b]])


# ---------------------------------------------------------------------------
# base sampling and transformations


def _base_components(spec, rule):
    """Component means/scales/weights of the base feature distribution.

    The ring concept (and any concept given a ``window_radius``) is sampled
    through a Gaussian selection window in the (x0, x1) plane.  Multiplying
    each class density by the window keeps every component Gaussian and
    leaves the posterior untouched, so the component index is still a draw
    from the labeling rule.
    """
    means, scales, weights = rule.means.copy(), rule.scales.copy(), rule.priors.copy()
    if spec.resolved_concept != "ring" and spec.window_radius is None:
        return means, scales, weights
    radius = spec.window_radius or ring_radius(spec)
    c = np.zeros(spec.d_x)
    c[0] = radius * math.cos(spec.window_angle)
    c[1] = radius * math.sin(spec.window_angle)
    w2 = spec.window_width ** 2
    for k in range(spec.n_classes):
        s2 = rule.scales[k, :2] ** 2
        prec = 1 / s2 + 1 / w2
        means[k, :2] = (rule.means[k, :2] / s2 + c[:2] / w2) / prec
        scales[k, :2] = np.sqrt(1 / prec)
        var = s2 + w2
        weights[k] *= np.exp(-0.5 * ((c[:2] - rule.means[k, :2]) ** 2 / var).sum()) / np.sqrt(var).prod()
    return means, scales, weights / weights.sum()


def _cumulative(spec, t):
    """Accumulated shift magnitude in effect at batch ``t``."""
    total = 0.0
    for j, (idx, mag) in enumerate(sorted(spec.shift_schedule)):
        if idx <= t:
            sign = -1.0 if (spec.alternate_drift and j % 2 == 1) else 1.0
            total += sign * mag
    return total


def shift_state(spec: StreamSpec, t: int) -> float:
    """Offset (mean drift), angle in radians (rotation), masked fraction or prior tilt at ``t``."""
    return _cumulative(spec, t)


def _rotation(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _sample_batch(spec, rule, t):
    rng = np.random.default_rng([spec.seed, t])
    means, scales, weights = _base_components(spec, rule)
    level = _cumulative(spec, t)
    if spec.kind == "class_imbalance":
        tilt = np.linspace(-0.5, 0.5, spec.n_classes) * level
        weights = weights * np.exp(tilt)
        weights /= weights.sum()
    comp = rng.choice(spec.n_classes, size=spec.n_per_batch, p=weights)
    X = means[comp] + scales[comp] * rng.standard_normal((spec.n_per_batch, spec.d_x))
    if spec.kind == "synthetic_mean_drift":
        X[:, -1] += level
    elif spec.kind == "synthetic_rotation":
        X[:, :2] = X[:, :2] @ _rotation(level).T
    elif spec.kind == "feature_mask":
        order = np.random.default_rng([spec.seed, 7919]).permutation(spec.d_x)
        k = int(round(min(level, 1.0) * spec.d_x))
        X[:, order[:k]] = 0.0
    y = rule.label(X, rng, spec.labels)
    n_h = _heldout_count(spec.n_per_batch)
    return FeatureBatch(t, X[n_h:].copy(), y[n_h:].copy(), X[:n_h].copy(), y[:n_h].copy(), spec.n_classes)


def _heldout_count(n):
    return min(n - 2, max(2, int(round(HELDOUT_FRACTION * n))))


def generate_stream(spec) -> Iterator[FeatureBatch]:
    """Yield exactly ``spec.T`` batches, lazily and deterministically in ``spec.seed``."""
    if isinstance(spec, dict):
        spec = StreamSpec(**spec)
    if spec.kind == "tabular_fragment":
        table = load_csv(spec.csv_path, spec.label_column, spec.has_header)
        batches = fragment_tabular(table, spec.T, spec.protocol, spec.seed, sort_column=spec.sort_column)
        return iter(batches)
    rule = labeling_rule(spec)

    def _gen():
        for t in range(spec.T):
            yield _sample_batch(spec, rule, t)

    return _gen()


# ---------------------------------------------------------------------------
# tabular data


@dataclass
class LabeledTable:
    features: np.ndarray
    labels: np.ndarray
    classes: list
    mean: np.ndarray
    std: np.ndarray
    feature_names: list
    warnings: list = field(default_factory=list)

    @property
    def n_classes(self):
        return len(self.classes)


def standardize(raw, names=None):
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    warnings = []
    const = std == 0
    for j in np.flatnonzero(const):
        name = names[j] if names else f"column {j}"
        warnings.append(f"{name} is constant; standardized to zero")
    safe = np.where(const, 1.0, std)
    return (raw - mean) / safe * ~const, mean, std, warnings


def load_csv(path, label_column=-1, has_header=False) -> LabeledTable:
    """Read a labeled CSV, standardizing features globally.

    Labels are mapped to ``0..C-1`` in order of first appearance.
    ``label_column`` is a 0-based index (negative counts from the end) or,
    when the file has a header, a column name.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header = None
    start_line = 1
    if has_header:
        if not rows:
            raise DataError(f"{path}: empty file")
        header, rows = [h.strip() for h in rows[0]], rows[1:]
        start_line = 2
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0])
    if isinstance(label_column, str):
        if header is None or label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not found")
        label_column = header.index(label_column)
    if not -width <= label_column < width:
        raise DataError(f"{path}: label column {label_column} out of range for {width} columns")
    label_column %= width
    feat_cols = [j for j in range(width) if j != label_column]
    raw = np.empty((len(rows), len(feat_cols)))
    classes, labels = [], []
    lookup = {}
    for i, row in enumerate(rows):
        line = start_line + i
        if len(row) != width:
            raise DataError(f"{path}: row {line} has {len(row)} cells, expected {width}")
        for k, j in enumerate(feat_cols):
            try:
                raw[i, k] = float(row[j])
            except ValueError:
                raise DataError(f"{path}: row {line}, column {j + 1}: cannot parse {row[j]!r}") from None
        lab = row[label_column].strip()
        if lab not in lookup:
            lookup[lab] = len(classes)
            classes.append(lab)
        labels.append(lookup[lab])
    if not np.isfinite(raw).all():
        bad = np.argwhere(~np.isfinite(raw))[0]
        raise DataError(f"{path}: row {start_line + bad[0]}, column {feat_cols[bad[1]] + 1}: non-finite value")
    names = [header[j] for j in feat_cols] if header else [f"x{j}" for j in feat_cols]
    X, mean, std, warnings = standardize(raw, names)
    return LabeledTable(X, np.array(labels, dtype=np.int64), classes, mean, std, names, warnings)


def _split_heldout(rows, rng):
    rows = np.asarray(rows)
    perm = rows[rng.permutation(len(rows))]
    n_h = _heldout_count(len(rows))
    return perm[n_h:], perm[:n_h]


def _allocate(counts_per_batch, pool):
    """Split ``pool`` into consecutive chunks of the given sizes."""
    bounds = np.concatenate([[0], np.cumsum(counts_per_batch)])
    return [pool[bounds[i]:bounds[i + 1]] for i in range(len(counts_per_batch))]


def _largest_remainder(total, shares):
    shares = np.asarray(shares, dtype=np.float64)
    exact = total * shares / shares.sum()
    base = np.floor(exact).astype(int)
    rest = total - base.sum()
    base[np.argsort(-(exact - base), kind="stable")[:rest]] += 1
    return base


def fragment_tabular(table: LabeledTable, T: int, protocol: str, seed: int = 0, *,
                     sort_column: int = 0, mask_fraction: float = 0.5,
                     imbalance_ratio: float = 4.0) -> list:
    """Partition a table into ``T`` ordered batches that exhibit covariate shift.

    ``sorted_feature`` sorts by one column and slices; ``feature_mask``
    zeroes a growing, seeded subset of features (up to ``mask_fraction``);
    ``imbalance`` tilts per-batch class shares from one end of the stream to
    the other, reaching ``imbalance_ratio``:1 at the extremes.
    """
    n, d = table.features.shape
    if T < 2:
        raise ConfigError("T", "at least 2 batches are required")
    if n < 4 * T:
        raise DataError(f"need at least {4 * T} rows for T={T} batches, got {n}")
    rng = np.random.default_rng([seed, 104729])
    X, y = table.features, table.labels
    if protocol == "sorted_feature":
        if not -d <= sort_column < d:
            raise ConfigError("sort_column", f"out of range for {d} features")
        slices = np.array_split(np.argsort(X[:, sort_column], kind="stable"), T)
    elif protocol == "feature_mask":
        slices = np.array_split(rng.permutation(n), T)
    elif protocol == "imbalance":
        C = table.n_classes
        z = np.linspace(-1.0, 1.0, T)
        v = np.linspace(-1.0, 1.0, C) if C > 1 else np.zeros(1)
        beta = 0.5 * math.log(imbalance_ratio)
        chunks = [[] for _ in range(T)]
        for c in range(C):
            pool = np.flatnonzero(y == c)
            pool = pool[rng.permutation(len(pool))]
            sizes = _largest_remainder(len(pool), np.exp(beta * z * v[c]))
            for t, part in enumerate(_allocate(sizes, pool)):
                chunks[t].append(part)
        slices = [np.sort(np.concatenate(parts)) for parts in chunks]
        small = [t for t, s in enumerate(slices) if len(s) < 4]
        if small:
            raise DataError(f"imbalance schedule leaves batch {small[0]} with fewer than 4 rows")
    else:
        raise ConfigError("protocol", f"unknown protocol {protocol!r}")

    mask_order = rng.permutation(d)
    batches = []
    for t, rows in enumerate(slices):
        train, held = _split_heldout(rows, rng)
        Xt, Xh = X[train].copy(), X[held].copy()
        if protocol == "feature_mask":
            k = int(round(mask_fraction * d * t / (T - 1)))
            Xt[:, mask_order[:k]] = 0.0
            Xh[:, mask_order[:k]] = 0.0
        batches.append(FeatureBatch(t, Xt, y[train], Xh, y[held], table.n_classes,
                                    train_rows=train, heldout_rows=held))
    return batches

"""End-to-end acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from fade import benchmarks as B
from fade.adapter import AdapterConfig, fade_step, init_state, regularized_loss, run_sequential
from fade.data_stream import BATCH_LEDGER, StreamSpec, generate_stream
from fade.detector import grade_severity
from fade.divergence import kl_gaussian, summarize
from fade.federated import FedConfig, gaussian_table, partition_clients, run_federated
from fade.fisher import estimate_fim
from fade.metrics import severity_stratified
from fade.models import Model, ModelSpec

from conftest import central_difference, record_criterion, write_csv

pytestmark = pytest.mark.acceptance

SEEDS5 = range(5)


class GaussianMean:
    def per_sample_scores(self, theta, X, y):
        return X[:, :1] - theta[0]


def test_criterion_01_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    archs = [("logistic", 2), ("logistic", 4), ("mlp1", 2), ("mlp1", 3)]
    for i in range(100):
        arch, C = archs[i % 4]
        d_x = int(rng.integers(1, 5))
        m = Model(ModelSpec(arch=arch, d_x=d_x, n_classes=C, hidden=int(rng.integers(1, 6))))
        theta, mu = rng.normal(size=(2, m.n_params))
        X, y = rng.normal(size=(int(rng.integers(1, 12)), d_x)), None
        y = rng.integers(0, C, X.shape[0])
        fim, lam = rng.random(m.n_params) * 3, float(rng.uniform(0, 2))
        _, g = m.nll_and_grad(theta, X, y)
        worst = max(worst, np.max(np.abs(g - central_difference(lambda th: m.nll(th, X, y), theta))))
        _, g = regularized_loss(m, theta, X, y, mu, fim, lam)
        fd = central_difference(lambda th: regularized_loss(m, th, X, y, mu, fim, lam)[0], theta)
        worst = max(worst, np.max(np.abs(g - fd)))
    elapsed = time.perf_counter() - t0
    ok = record_criterion(1, worst <= 1e-5 and elapsed < 30,
                          f"max abs gradient error {worst:.2e} over 100 instances x 2 losses ({elapsed:.1f}s)")
    assert ok


def test_criterion_02_fisher_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    n = 10_000
    info = estimate_fim(GaussianMean(), np.zeros(1), rng.normal(size=(n, 1)), np.zeros(n),
                        subsample=n).diag[0]
    rel = abs(info - 1.0)
    reps, m = 1000, 50
    var = rng.normal(size=(reps, m)).mean(axis=1).var(ddof=1)
    bound = 1.0 / (m * info)
    elapsed = time.perf_counter() - t0
    ok = record_criterion(2, rel <= 0.05 and var >= 0.95 * bound and elapsed < 60,
                          f"empirical Fisher {info:.4f} vs 1 (rel err {rel:.3f}); "
                          f"Var(mean) {var:.5f} >= 0.95 x bound {bound:.5f} ({elapsed:.1f}s)")
    assert ok


def test_criterion_03_kl_oracle():
    # mean of 20 independent n=10k estimates; one draw carries about 3% relative noise
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    pairs = [((0, 1), (1, 1), 0.5), ((0, 1), (0, 2), 0.5 * (math.log(4) + 0.25 - 1)),
             ((1, 2), (-1, 1), math.log(0.5) + (4 + 4) / 2 - 0.5)]
    errs = []
    for (mp, sp), (mq, sq), exact in pairs:
        est = [kl_gaussian(summarize(rng.normal(mp, sp, (10_000, 1))),
                           summarize(rng.normal(mq, sq, (10_000, 1)))) for _ in range(20)]
        errs.append(abs(np.mean(est) - exact) / exact)
    elapsed = time.perf_counter() - t0
    ok = record_criterion(3, max(errs) <= 0.02 and elapsed < 30,
                          "relative errors " + ", ".join(f"{e:.4f}" for e in errs)
                          + f" (exact 0.5, 0.318147, 2.806853; {elapsed:.1f}s)")
    assert ok


def test_criterion_04_detector_operating_point():
    t0 = time.perf_counter()
    fired = []
    for seed in range(20):
        spec = B.detector_stream(seed)
        log = run_sequential(generate_stream(spec), ModelSpec(arch="logistic", d_x=spec.d_x),
                             "fade", AdapterConfig(seed=seed), track_regret=False)
        fired.append([r["t"] for r in log.records if r["fired"]])
    p, r = B.precision_recall(fired, B.DETECTOR_JUMPS, tolerance=1)
    elapsed = time.perf_counter() - t0
    ok = record_criterion(4, p >= 0.8 and r >= 0.8 and elapsed < 120,
                          f"precision {p:.3f}, recall {r:.3f} over 20 seeds ({elapsed:.1f}s)")
    assert ok


@pytest.fixture(scope="module")
def severe_runs():
    t0 = time.perf_counter()
    runs = {m: [B.run_rotation(m, s) for s in SEEDS5] for m in ("fade", "erm_continue", "ewc")}
    return runs, time.perf_counter() - t0


def test_criterion_05_rotation_accuracy(severe_runs):
    runs, elapsed = severe_runs
    acc = {m: float(np.mean([l.summary["final_avg_acc"] for l in logs])) for m, logs in runs.items()}
    gain = acc["fade"] - acc["erm_continue"]
    ok = record_criterion(5, gain >= 0.05 and acc["fade"] >= acc["ewc"] and elapsed < 300,
                          f"final avg acc FADE {acc['fade']:.4f}, ERM {acc['erm_continue']:.4f}, "
                          f"EWC {acc['ewc']:.4f}; gain {100 * gain:.1f} points ({elapsed:.1f}s)")
    assert ok


def test_criterion_06_forgetting(severe_runs):
    runs, _ = severe_runs
    f = {m: float(np.mean([l.summary["forgetting"] for l in logs])) for m, logs in runs.items()}
    ok = record_criterion(6, f["fade"] <= 0.5 * f["erm_continue"],
                          f"forgetting FADE {f['fade']:.4f} vs 0.5 x ERM {0.5 * f['erm_continue']:.4f} "
                          f"(EWC {f['ewc']:.4f})")
    assert ok


def test_criterion_07_severity_gradation():
    t0 = time.perf_counter()
    logs = []
    for stratum, steps in B.ROTATION_STEPS.items():
        for step in steps:
            for s in SEEDS5:
                for m in ("fade", "erm_continue"):
                    logs.append(B.run_rotation(m, s, step))
    table = severity_stratified(logs, level="run")
    order = ("mild", "moderate", "severe")
    adv = [table[("fade", g)]["mean"] - table[("erm_continue", g)]["mean"] for g in order]
    counts = [table[("fade", g)]["count"] for g in order]
    monotone = all(a <= b for a, b in zip(adv, adv[1:]))
    elapsed = time.perf_counter() - t0
    ok = record_criterion(7, monotone and all(counts) and elapsed < 300,
                          "FADE - ERM by graded regime: " + ", ".join(
                              f"{g} {100 * a:+.2f} pts (n={c})" for g, a, c in zip(order, adv, counts))
                          + f" ({elapsed:.1f}s)")
    assert ok


def test_criterion_08_theorem_monitors():
    t0 = time.perf_counter()
    logs = [B.run_stationary(s) for s in range(3)]
    ravg = np.mean([[r["regret_avg"] for r in l.records] for l in logs], axis=0)
    dist = np.mean([[r["param_dist"] for r in l.records] for l in logs], axis=0)
    T = ravg.size
    half = ravg[T // 2:]
    slope_r = B.trend_slope(half)
    ts = np.arange(10, 201)
    slope_d = B.loglog_slope(ts, dist[ts - 1])
    a_ok = slope_r < 0 and half[-1] < half[0]
    elapsed = time.perf_counter() - t0
    ok = record_criterion(8, a_ok and slope_d <= -0.3 and elapsed < 180,
                          f"(a) R(T)/T final-half slope {slope_r:.2e}, {half[0]:.4f} -> {half[-1]:.4f}; "
                          f"(b) log-log slope of ||theta_T - theta*|| {slope_d:.3f} ({elapsed:.1f}s)")
    assert ok


def test_criterion_09_resource_contracts():
    t0 = time.perf_counter()
    peaks = []
    for method in ("fade", "erm_continue", "ewc"):
        BATCH_LEDGER.reset_peak()
        base = BATCH_LEDGER.live
        spec = StreamSpec(kind="synthetic_mean_drift", T=100, n_per_batch=200, d_x=4,
                          shift_schedule=[(50, 2.0)], seed=0)
        run_sequential(generate_stream(spec), ModelSpec(arch="logistic", d_x=4), method,
                       AdapterConfig(seed=0), track_regret=False)
        peaks.append(BATCH_LEDGER.peak - base)
    # timeit convention: interleave d values, keep each batch's fastest of 5 runs
    dims = (64, 128, 256)
    times = {d: [] for d in dims}
    for _ in range(5):
        for d in dims:
            spec = StreamSpec(kind="synthetic_mean_drift", T=30, n_per_batch=200, d_x=d, seed=0)
            log = run_sequential(generate_stream(spec), ModelSpec(arch="logistic", d_x=d), "fade",
                                 AdapterConfig(seed=0, always_train=True), track_regret=False)
            times[d].append([r["wall_ms"] for r in log.records[1:]])
    medians = [float(np.median(np.min(times[d], axis=0))) for d in dims]
    ratios = [b / a for a, b in zip(medians, medians[1:])]
    elapsed = time.perf_counter() - t0
    ok = record_criterion(9, max(peaks) <= 2 and max(ratios) <= 1.3 and elapsed < 180,
                          f"peak live raw batches {max(peaks)}; median ms/batch "
                          + ", ".join(f"{m:.2f}" for m in medians)
                          + " at d=64,128,256; ratios " + ", ".join(f"{r:.2f}" for r in ratios)
                          + f" ({elapsed:.1f}s)")
    assert ok


def test_criterion_10_degenerate_reductions():
    t0 = time.perf_counter()
    spec = B.rotation_stream(0)
    cfg = B.rotation_adapter(0, lam=0.0, always_train=True)
    a = run_sequential(generate_stream(spec), B.rotation_model(), "fade", cfg, track_regret=False)
    b = run_sequential(generate_stream(spec), B.rotation_model(), "erm_continue", cfg, track_regret=False)
    seq_ok = (a.summary["param_checksum"] == b.summary["param_checksum"]
              and [r["heldout_acc_matrix_row"] for r in a.records]
              == [r["heldout_acc_matrix_row"] for r in b.records])

    shards = B.federated_shards(0)
    fa = run_federated(shards, ModelSpec(arch="logistic", d_x=2), B.federated_config("fedavg", 0, rounds=10))
    fp = run_federated(shards, ModelSpec(arch="logistic", d_x=2),
                       B.federated_config("fedprox", 0, rounds=10, mu_prox=0.0))
    fed_ok = fa.deterministic_view() == [{**r, "method": "fedavg"} for r in fp.deterministic_view()] \
        and np.array_equal(fa.theta, fp.theta)

    model = Model(B.rotation_model())
    cfg1 = B.rotation_adapter(0, alpha=1.0, always_train=True)
    state = init_state(model, cfg1)
    I0 = state.I_global.diag.copy()
    ema_ok = True
    for batch in generate_stream(spec):
        state, _, _ = fade_step(state, batch, cfg1, model)
        ema_ok &= np.array_equal(state.I_global.diag, I0)
    elapsed = time.perf_counter() - t0
    ok = record_criterion(10, seq_ok and fed_ok and ema_ok and elapsed < 60,
                          f"lambda=0 == ERM: {seq_ok}; FedProx(mu=0) == FedAvg: {fed_ok}; "
                          f"alpha=1 keeps I_global: {ema_ok} ({elapsed:.1f}s)")
    assert ok


def test_criterion_11_federated_label_skew():
    t0 = time.perf_counter()
    acc = {m: float(np.mean([B.run_federated_benchmark(m, s).final_acc for s in SEEDS5]))
           for m in ("fade_fed", "fedavg", "fedprox")}
    elapsed = time.perf_counter() - t0
    ok = record_criterion(11, acc["fade_fed"] >= acc["fedavg"] + 0.02 and acc["fade_fed"] >= acc["fedprox"]
                          and elapsed < 300,
                          f"pooled acc fade_fed {acc['fade_fed']:.4f}, FedAvg {acc['fedavg']:.4f}, "
                          f"FedProx {acc['fedprox']:.4f} ({elapsed:.1f}s)")
    assert ok


TABULAR = ("digits", "iris", "wine", "breast_cancer")


def test_criterion_12_tabular_sorted_feature(tmp_path):
    datasets = pytest.importorskip("sklearn.datasets")
    t0 = time.perf_counter()
    results = {}
    for name in TABULAR:
        data = getattr(datasets, f"load_{name}")()
        path = write_csv(tmp_path / f"{name}.csv", data.data, data.target)
        C = len(set(data.target))
        acc = {}
        for method in ("fade", "erm_continue"):
            vals = []
            for s in SEEDS5:
                spec = StreamSpec(kind="tabular_fragment", T=B.TABULAR_T, csv_path=str(path), seed=s,
                                  protocol="sorted_feature", sort_column=B.TABULAR_SORT_COLUMN)
                log = run_sequential(generate_stream(spec),
                                     ModelSpec(arch="logistic", d_x=data.data.shape[1], n_classes=C),
                                     method, AdapterConfig(seed=s, **B.TABULAR_ADAPTER), track_regret=False)
                vals.append(log.summary["final_avg_acc"])
            acc[method] = float(np.mean(vals))
        results[name] = acc
    wins = [n for n, a in results.items() if a["fade"] >= a["erm_continue"]]
    elapsed = time.perf_counter() - t0
    ok = record_criterion(12, len(wins) >= 2 and elapsed < 180,
                          "; ".join(f"{n} FADE {a['fade']:.3f} vs ERM {a['erm_continue']:.3f}"
                                    for n, a in results.items())
                          + f"; FADE >= ERM on {len(wins)}/4 ({elapsed:.1f}s)")
    assert ok

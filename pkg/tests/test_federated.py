import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fade.adapter import AdapterConfig, optimize
from fade.detector import calibrate_gamma
from fade.divergence import delta_scs, summarize
from fade.errors import ConfigError, DataError
from fade.federated import (MESSAGE_FIELDS, ClientShard, FedConfig, client_tau, gaussian_table,
                            partition_clients, run_federated)
from fade.fisher import estimate_fim, fim_distance
from fade.models import Model, ModelSpec

LOGI = ModelSpec(arch="logistic", d_x=2)


def _rows(shards):
    return np.concatenate([np.r_[s.data.train_rows, s.data.heldout_rows] for s in shards])


@pytest.mark.parametrize("skew", ["iid", "label_skew", "feature_skew"])
def test_partition_is_disjoint_and_exhaustive(skew):
    table = gaussian_table(500, seed=1)
    shards = partition_clients(table, 6, skew, 0.5, seed=1)
    assert np.array_equal(np.sort(_rows(shards)), np.arange(500))
    assert all(s.n_k == s.data.n and s.data.n + s.data.heldout_features.shape[0] >= 4 for s in shards)


def test_iid_proportions_track_global():
    table = gaussian_table(4000, seed=0)
    glob = table.labels.mean()
    for s in partition_clients(table, 4, "iid", seed=0):
        share = np.r_[s.data.labels, s.data.heldout_labels].mean()
        assert abs(share - glob) <= 0.05


def test_dirichlet_point_one_concentrates_mass():
    hits = 0
    for seed in range(10):
        shards = partition_clients(gaussian_table(2000, seed=seed), 8, "label_skew", 0.1, seed=seed)
        shares = [np.r_[s.data.labels, s.data.heldout_labels].mean() for s in shards]
        hits += any(max(p, 1 - p) >= 0.8 for p in shares)
    assert hits > 5


def test_feature_skew_moves_client_means():
    shards = partition_clients(gaussian_table(2000, seed=0), 4, "feature_skew", seed=0)
    means = np.array([s.data.features.mean(axis=0) for s in shards])
    assert np.ptp(means[:, 1]) > 0.5


def test_partition_errors():
    table = gaussian_table(20, seed=0)
    with pytest.raises(ConfigError):
        partition_clients(table, 1)
    with pytest.raises(DataError, match="infeasible"):
        partition_clients(table, 8, "iid")
    with pytest.raises(ConfigError, match="skew"):
        partition_clients(gaussian_table(100), 2, "quantity_skew")


def test_single_client_round_is_local_training():
    shard = partition_clients(gaussian_table(400, seed=2), 2, "iid", seed=2)[0]
    cfg = FedConfig(rounds=1, clients_per_round=1, local_epochs=3, seed=4)
    log = run_federated([shard], LOGI, cfg)
    model = Model(LOGI)
    local = optimize(model.nll_and_grad, model.init_params(), shard.data.features, shard.data.labels,
                     epochs=3, lr=cfg.learning_rate, batch_size=cfg.batch_size,
                     seed=[4, 0, shard.client_id])
    assert np.allclose(log.theta, local, atol=1e-14, rtol=0)


def test_fedprox_zero_mu_equals_fedavg():
    shards = partition_clients(gaussian_table(600, seed=3), 5, "label_skew", 0.3, seed=3)
    a = run_federated(shards, LOGI, FedConfig(rounds=6, clients_per_round=3, method="fedavg", seed=3))
    b = run_federated(shards, LOGI, FedConfig(rounds=6, clients_per_round=3, method="fedprox",
                                              mu_prox=0.0, seed=3))
    assert [r["pooled_heldout_acc"] for r in a.rounds] == [r["pooled_heldout_acc"] for r in b.rounds]
    assert np.array_equal(a.theta, b.theta)
    c = run_federated(shards, LOGI, FedConfig(rounds=6, clients_per_round=3, method="fedprox",
                                              mu_prox=1.0, seed=3))
    assert not np.array_equal(a.theta, c.theta)


@pytest.mark.parametrize("method", ["fedavg", "fedprox", "fade_fed"])
def test_aggregation_weights_and_message_surface(method):
    shards = partition_clients(gaussian_table(600, seed=5), 6, "label_skew", 0.3, seed=5)
    cfg = FedConfig(rounds=4, clients_per_round=3, method=method, seed=5, local_epochs=2)
    log = run_federated(shards, LOGI, cfg)
    theta = Model(LOGI).init_params()
    for r in range(cfg.rounds):
        msgs = [m for m in log.messages if m["round"] == r]
        assert [m["client_id"] for m in msgs] == log.rounds[r]["participating_clients"]
        total = sum(m["n_k"] for m in msgs)
        theta = theta + sum((m["n_k"] / total) * m["delta"] for m in msgs)
    assert np.max(np.abs(theta - log.theta)) <= 1e-12
    for m in log.messages:
        assert set(m) <= MESSAGE_FIELDS
        assert not any(isinstance(v, np.ndarray) and v.ndim == 2 for v in m.values())
        if method == "fade_fed":
            assert {"fim", "stats"} <= set(m)


def test_federated_determinism_and_schema():
    shards = partition_clients(gaussian_table(600, seed=6), 6, "label_skew", 0.1, seed=6)
    cfg = FedConfig(rounds=5, clients_per_round=4, method="fade_fed", seed=6)
    a, b = run_federated(shards, LOGI, cfg), run_federated(shards, LOGI, cfg)
    assert a.deterministic_view() == b.deterministic_view()
    assert np.array_equal(a.theta, b.theta)
    keys = {"round", "method", "participating_clients", "pooled_heldout_acc", "mean_client_tau",
            "fired_fraction", "wall_ms"}
    assert all(set(r) == keys for r in a.rounds)
    assert len(a.to_jsonl().splitlines()) == 5


def test_fade_fed_lambda_zero_matches_fedavg():
    shards = partition_clients(gaussian_table(600, seed=7), 6, "label_skew", 0.3, seed=7)
    a = run_federated(shards, LOGI, FedConfig(rounds=4, method="fedavg", seed=7))
    b = run_federated(shards, LOGI, FedConfig(rounds=4, method="fade_fed", seed=7,
                                              fade=AdapterConfig(lam=0.0)))
    assert np.array_equal(a.theta, b.theta)


def test_config_errors():
    shards = partition_clients(gaussian_table(100, seed=0), 2, "iid")
    with pytest.raises(ConfigError):
        run_federated(shards, LOGI, FedConfig(clients_per_round=3))
    with pytest.raises(DataError):
        run_federated([], LOGI, FedConfig())


def _artifacts(model, theta, shard):
    b = shard.data
    return estimate_fim(model, theta, b.features, b.labels), summarize(b.features)


def test_client_tau_identity_and_factorization():
    model = Model(LOGI)
    theta = np.array([1.0, 0.5, 0.3])
    shard = partition_clients(gaussian_table(400, seed=0), 2, "iid")[0]
    I, s = _artifacts(model, theta, shard)
    assert client_tau(I, I, s, s) == 0.0
    other = partition_clients(gaussian_table(400, seed=0), 2, "label_skew", 0.1)[1]
    J, q = _artifacts(model, theta, other)
    assert client_tau(J, I, q, s) == delta_scs(s, q) * fim_distance(J, I)


def test_opposite_extremes_exceed_calibrated_gamma():
    # gamma: 0.95 quantile of tau between consecutive iid clients; fixed non-symmetric theta
    model = Model(LOGI)
    theta = np.array([1.0, 0.5, 0.3])
    wins = 0
    for seed in range(20):
        table = gaussian_table(2000, seed=seed)
        iid = [_artifacts(model, theta, s) for s in partition_clients(table, 8, "iid", seed=seed)]
        taus = [client_tau(iid[i][0], iid[i - 1][0], iid[i][1], iid[i - 1][1]) for i in range(1, 8)]
        gamma = calibrate_gamma(taus, 0.95, len(taus))
        skew = partition_clients(table, 8, "label_skew", 0.1, seed=seed)
        share = [s.data.labels.mean() for s in skew]
        (Ia, sa), (Ib, sb) = (_artifacts(model, theta, skew[int(np.argmin(share))]),
                              _artifacts(model, theta, skew[int(np.argmax(share))]))
        wins += client_tau(Ia, Ib, sa, sb) > gamma
    assert wins > 10


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.integers(2, 8), conc=st.floats(0.05, 10),
       skew=st.sampled_from(["iid", "label_skew", "feature_skew"]))
def test_partition_property(seed, K, conc, skew):
    table = gaussian_table(200, seed=seed)
    shards = partition_clients(table, K, skew, conc, seed=seed)
    rows = _rows(shards)
    assert len(shards) == K
    assert rows.size == 200 and np.unique(rows).size == 200

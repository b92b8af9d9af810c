import math

import numpy as np
import pytest

from fedl2p import nn
from fedl2p.data import DataSpec, make_benchmark
from fedl2p.federation import (FLConfig, client_meta_steps, fedavg_aggregate, n_sampled,
                               pretrain_fedavg, profile_clients, run_fedl2p, sample_clients)
from fedl2p.hypergrad import HypergradConfig
from fedl2p.metanets import init_meta

SMALL = DataSpec(dim=4, n_classes=3, n_domains=2, clients_per_domain=3, samples_per_client=40,
                 pretrain_clients=4, shift=2.0)


@pytest.fixture(scope="module")
def setup():
    bench = make_benchmark(SMALL, np.random.default_rng(0))
    model = nn.init_model(SMALL.dim, [8], SMALL.n_classes, np.random.default_rng(1))
    model = pretrain_fedavg(model, bench.pretrain, rounds=20, lr=0.1, seed=2, local_epochs=2)
    return bench, model


def fast_cfg(**kw):
    base = dict(rounds=3, fraction=1.0, epochs=2, batch_size=16, seed=5,
                hypergrad=HypergradConfig(lr_dependence="trajectory", zeta_bn=0.1,
                                          zeta_lr=0.05))
    base.update(kw)
    return FLConfig(**base)


# ---------------------------------------------------------------- aggregation

def test_fedavg_examples():
    assert fedavg_aggregate([(np.array([0.0]), 1), (np.array([2.0]), 1)])[0] == 1.0
    assert fedavg_aggregate([(np.array([0.0]), 1), (np.array([4.0]), 3)])[0] == pytest.approx(
        3.0, abs=1e-15)
    v = np.array([0.1, -7.3, 1e-9])
    assert np.array_equal(fedavg_aggregate([(v, 17)]), v)


def test_fedavg_linear():
    rng = np.random.default_rng(0)
    vs = [rng.normal(size=4) for _ in range(3)]
    ns = [3, 5, 2]
    a, b = 2.5, -1.0
    lhs = fedavg_aggregate([(a * v + b, n) for v, n in zip(vs, ns)])
    rhs = a * fedavg_aggregate(list(zip(vs, ns))) + b
    assert np.allclose(lhs, rhs, atol=1e-14)


def test_fedavg_errors():
    with pytest.raises(ValueError):
        fedavg_aggregate([])
    with pytest.raises(ValueError):
        fedavg_aggregate([(np.zeros(2), 0)])
    with pytest.raises(ValueError):
        fedavg_aggregate([(np.zeros(2), 1), (np.zeros(3), 1)])


# ---------------------------------------------------------------- sampling

def test_sampling_counts_and_determinism():
    ids = sample_clients(250, 0.1, seed=3, round_index=7)
    assert len(ids) == 25 and len(set(ids)) == 25
    assert ids == sample_clients(250, 0.1, seed=3, round_index=7)
    assert ids != sample_clients(250, 0.1, seed=3, round_index=8)
    assert sorted(sample_clients(30, 1.0, 0, 0)) == list(range(30))
    assert n_sampled(30, 0.2) == 6
    with pytest.raises(ValueError):
        n_sampled(30, 0.0)


# ---------------------------------------------------------------- pretraining

def test_pretraining_beats_majority(setup):
    bench, model = setup
    x = np.concatenate([c.x_test for c in bench.pretrain])
    y = np.concatenate([c.y_test for c in bench.pretrain])
    majority = np.bincount(y).max() / len(y)
    assert nn.accuracy(model, x, y, nn.GLOBAL) > majority


def test_single_client_pretraining_is_centralized_sgd(setup):
    bench, _ = setup
    client = bench.pretrain[0]
    start = nn.init_model(SMALL.dim, [8], SMALL.n_classes, np.random.default_rng(1),
                          batch_norm=False)
    fed = pretrain_fedavg(start, [client], rounds=2, lr=0.1, seed=4, milestones=())
    layout = nn.ParamLayout.of(start)
    theta = layout.flatten(start)
    x, y = client.train
    for t in range(2):
        rng = np.random.default_rng([4, t, client.client_id, 7])
        order = rng.permutation(len(y))
        for s in range(0, len(y), 32):
            idx = order[s:s + 32]
            theta = theta - 0.1 * nn.grad(layout.unflatten(start, theta), x[idx], y[idx])
    assert np.allclose(layout.flatten(fed), theta, rtol=0, atol=1e-12)


def test_pooled_bn_stats_exact(setup):
    bench, model = setup
    x = np.concatenate([c.x_train for c in bench.pretrain])
    ref = nn.update_running_stats(model, x)
    for i in model.bn_indices:
        assert np.allclose(model.layers[i].pt_mean, ref.layers[i].client_mean, atol=1e-10)
        assert np.allclose(model.layers[i].pt_var, ref.layers[i].client_var, atol=1e-10)


# ---------------------------------------------------------------- meta-net federation

def test_zero_iterations_keep_initial_meta(setup):
    bench, model = setup
    meta = init_meta(model.n_layers, model.n_bn, seed=0, base_lr=0.05)
    res = run_fedl2p(model, bench.clients, meta, fast_cfg(meta_iters=0, rounds=2))
    assert np.array_equal(res.meta.to_vector(), meta.to_vector())
    assert np.array_equal(res.final.to_vector(), meta.to_vector())


def test_single_client_matches_centralized_meta_sgd(setup):
    bench, model = setup
    client = bench.clients[0]
    meta0 = init_meta(model.n_layers, model.n_bn, seed=0, base_lr=0.05)
    cfg = fast_cfg(rounds=3)
    res = run_fedl2p(model, [client], meta0, cfg)
    prof = profile_clients(model, [client])[client.client_id]
    meta = meta0
    for t in range(cfg.rounds):
        meta, _ = client_meta_steps(meta, model, prof, client, cfg, 1,
                                    (cfg.seed, t, client.client_id))
        assert res.records[t].checksum == meta.checksum()
    assert np.array_equal(res.final.to_vector(), meta.to_vector())


def test_checkpoint_is_best_round(setup):
    bench, model = setup
    meta = init_meta(model.n_layers, model.n_bn, seed=0, base_lr=0.05)
    res = run_fedl2p(model, bench.clients, meta, fast_cfg(rounds=4, fraction=0.5))
    losses = [r.mean_val_loss for r in res.records]
    assert res.best_round == int(np.nanargmin(losses))
    assert losses[res.best_round] <= losses[0]
    # the kept meta-params are the ones broadcast in the best round
    broadcast = meta if res.best_round == 0 else None
    if broadcast is not None:
        assert np.array_equal(res.meta.to_vector(), meta.to_vector())
    else:
        assert res.meta.checksum() == res.records[res.best_round - 1].checksum


def test_run_deterministic_and_parallel_identical(setup):
    bench, model = setup
    meta = init_meta(model.n_layers, model.n_bn, seed=0, base_lr=0.05)
    a = run_fedl2p(model, bench.clients, meta, fast_cfg(rounds=2, fraction=0.5))
    b = run_fedl2p(model, bench.clients, meta, fast_cfg(rounds=2, fraction=0.5))
    c = run_fedl2p(model, bench.clients, meta, fast_cfg(rounds=2, fraction=0.5, workers=2))
    assert a.final.checksum() == b.final.checksum() == c.final.checksum()
    assert [r.participants for r in a.records] == [r.participants for r in c.records]


def test_diverging_clients_are_dropped(setup):
    bench, model = setup
    meta = init_meta(model.n_layers, model.n_bn, seed=0, base_lr=1e8)
    res = run_fedl2p(model, bench.clients[:2], meta, fast_cfg(rounds=1))
    assert all(c.diverged for c in res.records[0].clients)
    assert math.isnan(res.records[0].mean_val_loss)
    assert np.array_equal(res.final.to_vector(), meta.to_vector())

import numpy as np
import pytest

from fedl2p import nn
from fedl2p.profile import (build_profile, gaussian_kl, gaussian_sym_kl, profile_xi,
                            read_profiles_csv, write_profiles_csv)


def test_sym_kl_hand_cases():
    assert gaussian_sym_kl((0, 1), (0, 1)) == 0.0
    assert gaussian_sym_kl((1, 1), (0, 1)) == pytest.approx(0.5, abs=1e-9)
    assert gaussian_sym_kl((0, 4), (0, 1)) == pytest.approx(0.5625, abs=1e-9)


def test_sym_kl_matches_average_of_directed():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m1, m2 = rng.normal(size=2)
        v1, v2 = rng.uniform(0.1, 5, size=2)
        expected = 0.5 * (gaussian_kl(m1, v1, m2, v2) + gaussian_kl(m2, v2, m1, v1))
        assert gaussian_sym_kl((m1, v1), (m2, v2)) == pytest.approx(expected, abs=1e-12)


def test_sym_kl_symmetric_nonnegative_random_pairs():
    rng = np.random.default_rng(1)
    mu = rng.normal(0, 3, size=(1000, 2))
    var = np.exp(rng.normal(0, 1.5, size=(1000, 2)))
    pq = gaussian_sym_kl((mu[:, 0], var[:, 0]), (mu[:, 1], var[:, 1]))
    qp = gaussian_sym_kl((mu[:, 1], var[:, 1]), (mu[:, 0], var[:, 0]))
    assert np.all(pq >= 0)
    assert np.allclose(pq, qp, rtol=1e-12, atol=0)


def test_sym_kl_zero_variance_finite():
    assert np.isfinite(gaussian_sym_kl((0.0, 0.0), (0.0, 1.0)))


def test_profile_xi_channel_average():
    xi = profile_xi(([1.0, 0.0], [1.0, 4.0]), ([0.0, 0.0], [1.0, 1.0]))
    assert xi == pytest.approx(0.53125, abs=1e-9)
    assert profile_xi(([0.3], [2.0]), ([0.3], [2.0])) == 0.0
    with pytest.raises(ValueError):
        profile_xi(([0.0], [1.0]), ([0.0, 0.0], [1.0, 1.0]))


def _pretrained(rng, n=5000):
    x = rng.normal(size=(n, 3))
    model = nn.init_model(3, [8, 8], 2, rng)
    model = nn.update_running_stats(model, x)
    layers = list(model.layers)
    for i in model.bn_indices:
        b = layers[i]
        layers[i] = nn.BatchNorm(b.gamma, b.delta, b.client_mean, b.client_var)
    return nn.Model(tuple(layers))


def test_profile_in_distribution_small_shifted_large():
    rng = np.random.default_rng(0)
    model = _pretrained(rng)
    # noise bound from resampling in-distribution clients
    null = [build_profile(model, rng.normal(size=(200, 3))).xi for _ in range(20)]
    bound = np.max(null, axis=0)
    assert bound[0] < 0.1
    shifted = build_profile(model, rng.normal(size=(200, 3)) + 2.0).xi
    assert shifted[0] > bound[0]


def test_profile_deterministic_and_shapes():
    rng = np.random.default_rng(1)
    model = _pretrained(rng)
    x = rng.normal(size=(40, 3))
    a, b = build_profile(model, x), build_profile(model, x)
    assert np.array_equal(a.xi, b.xi) and np.array_equal(a.feat_stats, b.feat_stats)
    assert a.xi.shape == (model.n_bn,)
    assert a.feat_stats.shape == (2 * model.n_layers,)
    with pytest.raises(ValueError):
        build_profile(model, np.zeros((0, 3)))


def test_profile_stats_match_running_stats():
    rng = np.random.default_rng(2)
    model = _pretrained(rng)
    x = rng.normal(size=(30, 3))
    installed = build_profile(model, x).install(model)
    ref = nn.update_running_stats(model, x)
    for i in model.bn_indices:
        assert np.allclose(installed.layers[i].client_mean, ref.layers[i].client_mean)


def test_profiles_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    model = _pretrained(rng)
    profs = [(c, build_profile(model, rng.normal(size=(20, 3)))) for c in (4, 9)]
    write_profiles_csv(tmp_path / "p.csv", profs)
    back = read_profiles_csv(tmp_path / "p.csv")
    for c, p in profs:
        assert np.array_equal(back[c], p.xi)

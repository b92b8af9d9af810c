import time

import numpy as np
import pytest

from fedl2p import nn
from fedl2p.hypergrad import (FinetuneSettings, HypergradConfig, client_hypergradient,
                              clip_hypergradient, direct_val_grad, implicit_hypergradient,
                              meta_update, mixed_partial_term, neumann_inverse_hvp)
from fedl2p.metanets import init_meta
from fedl2p.nn import BNMode, DivergenceError
from fedl2p.profile import build_profile


def scalar_hvp(h):
    return lambda u: h * u


# ---------------------------------------------------------------- Neumann series

def test_neumann_hand_value():
    p = neumann_inverse_hvp(np.array([1.0]), scalar_hvp(2.0), psi=0.1, q=3)
    assert p[0] == pytest.approx(0.2952, abs=1e-12)


def test_neumann_limit_and_edge_cases():
    assert neumann_inverse_hvp(np.array([1.0]), scalar_hvp(2.0), 0.1, 200)[0] == pytest.approx(
        0.5, abs=1e-6)
    assert neumann_inverse_hvp(np.array([1.0]), scalar_hvp(2.0), 0.1, 0)[0] == pytest.approx(0.1)
    assert not np.any(neumann_inverse_hvp(np.zeros(3), scalar_hvp(2.0), 0.1, 5))


def test_neumann_divergence_flagged():
    with pytest.raises(DivergenceError):
        neumann_inverse_hvp(np.array([1.0]), scalar_hvp(1e3), psi=1.0, q=500)


def test_neumann_random_spd_convergence():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.normal(size=(5, 5))
        h = a @ a.T + 0.5 * np.eye(5)
        psi = 0.9 / np.linalg.eigvalsh(h).max()
        v = rng.normal(size=5)
        exact = np.linalg.solve(h, v)
        errs = [np.linalg.norm(neumann_inverse_hvp(v, lambda u: h @ u, psi, q) - exact)
                / np.linalg.norm(exact) for q in range(0, 501, 25)]
        assert errs[-1] < 1e-4
        assert all(b <= a for a, b in zip(errs, errs[1:]))


# ---------------------------------------------------------------- mixed partial and direct term

def test_mixed_partial_zero_p():
    calls = []
    out = mixed_partial_term(np.zeros(3), lambda h: calls.append(h) or np.ones(3), np.ones(2))
    assert not np.any(out) and not calls


def test_mixed_partial_linear_toy():
    c = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    p = np.array([0.3, -0.2, 1.0])
    out = mixed_partial_term(p, lambda h: -(c @ h), np.array([0.4, 0.01]))
    assert np.allclose(out, -(p @ c), rtol=1e-8)


def test_mixed_partial_one_sided_at_bound():
    bounds = (np.zeros(1), np.ones(1))
    out = mixed_partial_term(np.ones(1), lambda h: h ** 2, np.array([1.0]), 1e-6, bounds=bounds)
    assert out[0] == pytest.approx(2.0, rel=1e-5)


def test_direct_quadratic_in_mixed_mean():
    pt_mean, client_mean, target = 0.5, 2.0, 1.3

    def val_loss(b):
        mixed = (1 - b[0]) * pt_mean + b[0] * client_mean
        return (mixed - target) ** 2

    for beta in (0.0, 0.3, 1.0):
        analytic = 2 * ((1 - beta) * pt_mean + beta * client_mean - target) * (client_mean - pt_mean)
        g = direct_val_grad(val_loss, np.array([beta]), 1e-6)
        assert np.isfinite(g[0])
        assert g[0] == pytest.approx(analytic, abs=1e-4)


def test_direct_zero_when_client_equals_pretrained(rng):
    model = nn.init_model(3, [5], 2, rng)
    x = rng.normal(size=(40, 3))
    model = nn.update_running_stats(model, x)
    layers = list(model.layers)
    b = layers[1]
    layers[1] = nn.BatchNorm(b.gamma, b.delta, b.client_mean, b.client_var,
                             b.client_mean, b.client_var)
    model = nn.Model(tuple(layers))
    y = rng.integers(0, 2, size=40)
    g = direct_val_grad(lambda bb: nn.loss(model, x, y, BNMode.mixed(bb)), np.array([0.4]))
    assert g[0] == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------- scalar bilevel oracle

@pytest.mark.parametrize("lam", [-2.0, 1.0, 3.0])
def test_scalar_bilevel_oracle(lam):
    # L_T = (theta - lam)^2 / 2, L_V = theta^2 / 2, theta* = lam, dL_V/dlam = lam
    cfg = HypergradConfig(q=50, psi=0.1)
    theta = lam
    start = time.perf_counter()
    dh = implicit_hypergradient(np.array([theta]), scalar_hvp(1.0),
                                lambda h: np.array([theta - h[0]]), np.array([lam]),
                                np.zeros(1), cfg)
    assert time.perf_counter() - start < 1.0
    assert dh[0] == pytest.approx(lam, rel=0.02)


# ---------------------------------------------------------------- clipping and update

def test_clip_and_update_examples():
    meta = init_meta(1, 1, seed=0)
    h = meta.map(lambda a: np.full_like(a, 5.0))
    assert np.all(clip_hypergradient(h, 1.0).to_vector() == 1.0)
    assert np.all(clip_hypergradient(h.map(np.negative), 1.0).to_vector() == -1.0)

    cfg = HypergradConfig(zeta_bn=1e-3, zeta_lr=1e-3, zeta_eta=1e-3)
    assert np.array_equal(meta_update(meta, meta.zeros_like(), cfg).to_vector(), meta.to_vector())
    half = meta.map(lambda a: np.full_like(a, 0.5))
    ones = meta.map(np.ones_like)
    assert np.allclose(meta_update(half, ones, cfg).to_vector(), 0.499, rtol=0, atol=1e-15)


def test_update_block_rates():
    meta = init_meta(1, 1, seed=0).map(np.zeros_like)
    ones = meta.map(np.ones_like)
    out = meta_update(meta, ones, HypergradConfig(zeta_bn=1.0, zeta_lr=2.0, zeta_eta=3.0))
    assert all(np.all(a == -1.0) for a in out.bn)
    assert all(np.all(a == -2.0) for a in out.lr)
    assert np.all(out.eta_tilde == -3.0)


def test_config_validation():
    with pytest.raises(ValueError):
        HypergradConfig(lr_dependence="nope")
    with pytest.raises(ValueError):
        HypergradConfig(psi=0.0)
    with pytest.raises(ValueError):
        HypergradConfig(q=-1)


# ---------------------------------------------------------------- full client step

def _client(rng, dead=False):
    model = nn.init_model(3, [6], 2, rng)
    x = rng.normal(size=(60, 3)) + 0.5
    y = (x[:, 0] > 0.5).astype(int)
    model = nn.update_running_stats(model, x)
    if dead:
        layers = list(model.layers)
        layers[1] = nn.BatchNorm(layers[1].gamma, np.full(6, -100.0), layers[1].pt_mean,
                                 layers[1].pt_var, layers[1].client_mean, layers[1].client_var)
        model = nn.Model(tuple(layers))
    prof = build_profile(model, x[:40])
    return prof.install(model), prof, (x[:40], y[:40]), (x[40:], y[40:])


@pytest.mark.parametrize("dependence", ["last_step", "trajectory"])
def test_client_step_finite_and_clipped(rng, dependence):
    model, prof, train, val = _client(rng)
    meta = init_meta(model.n_layers, model.n_bn, seed=0, base_lr=0.05)
    cfg = HypergradConfig(lr_dependence=dependence, clip=0.01)
    step = client_hypergradient(meta, model, prof, train, val, cfg, FinetuneSettings(2, 16),
                                np.random.default_rng(0))
    vec = step.hypergrad.to_vector()
    assert np.all(np.isfinite(vec)) and np.max(np.abs(vec)) <= 0.01
    assert np.isfinite(step.val_loss)


def test_zero_post_multiplier_blocks_lrnet_gradient(rng):
    model, prof, train, val = _client(rng)
    meta = init_meta(model.n_layers, model.n_bn, seed=0, base_lr=0.0)
    step = client_hypergradient(meta, model, prof, train, val, HypergradConfig(),
                                FinetuneSettings(2, 16), np.random.default_rng(0))
    assert not any(np.any(g) for g in step.hypergrad.lr)


@pytest.mark.parametrize("dependence", ["last_step", "trajectory"])
def test_dead_path_learning_rates_get_no_signal(rng, dependence):
    model, prof, train, val = _client(rng, dead=True)
    meta = init_meta(model.n_layers, model.n_bn, seed=0, base_lr=0.05)
    cfg = HypergradConfig(lr_dependence=dependence)
    step = client_hypergradient(meta, model, prof, train, val, cfg, FinetuneSettings(2, 16),
                                np.random.default_rng(0))
    # every group except the output bias sits behind dead ReLUs
    assert np.allclose(step.hypergrad.eta_tilde[:-1], 0.0, atol=1e-10)
    assert abs(step.hypergrad.eta_tilde[-1]) > 1e-10

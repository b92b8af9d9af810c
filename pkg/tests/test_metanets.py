import numpy as np
import pytest

from fedl2p import metanets as mn
from fedl2p.metanets import MetaParams, init_meta


def test_init_outputs_near_bias():
    meta = init_meta(3, 2, seed=0, base_lr=1e-3)
    out = mn.hyper_outputs(meta, np.zeros(2), np.zeros(6))
    # the bias path sets the centre; the 100-wide random hidden sums add a spread
    assert np.allclose(out.beta, 0.5, atol=0.2)
    assert np.allclose(out.raw_lr, 1.0, atol=0.4)
    assert abs(np.mean(out.raw_lr) - 1.0) < 0.1
    assert np.allclose(out.eta, 1e-3 * out.raw_lr, rtol=1e-12)


def test_init_deterministic():
    a, b = init_meta(3, 2, seed=7), init_meta(3, 2, seed=7)
    assert np.array_equal(a.to_vector(), b.to_vector())
    assert not np.array_equal(a.to_vector(), init_meta(3, 2, seed=8).to_vector())


def test_architecture_shapes():
    meta = init_meta(3, 2, seed=0)
    assert [w.shape for w in meta.bn[::2]] == [(2, 100), (100, 100), (100, 2)]
    assert [w.shape for w in meta.lr[::2]] == [(6, 100), (100, 100), (100, 6)]
    assert meta.n_bn == 2 and meta.n_groups == 6


def test_clamp_forward_values():
    assert mn.clamp_ste(np.array([-0.2]), 0, 1)[0] == 0.0
    assert mn.clamp_ste(np.array([0.7]), 0, 1)[0] == 0.7
    assert mn.clamp_ste(np.array([1500.0]), *mn.LR_RANGE)[0] == 1000.0


def _with_output_bias(params, value):
    params = list(params)
    params[4] = np.zeros_like(params[4])
    params[5] = np.full_like(params[5], value)
    return tuple(params)


def test_straight_through_gradient_below_clamp():
    meta = init_meta(1, 1, seed=0)
    bn = _with_output_bias(meta.bn, -0.2)
    beta, cache = mn.bnnet_forward(bn, np.zeros(1))
    assert beta[0] == 0.0
    grads = mn.bnnet_vjp(bn, cache, np.array([1.0]))
    assert grads[5][0] == 1.0  # passes through unchanged


def test_lrnet_clamp_and_post_multiplier():
    meta = init_meta(1, 1, seed=0)
    lr = _with_output_bias(meta.lr, 1500.0)
    tilde = np.array([1e-3, 2e-3])
    assert np.allclose(mn.lrnet_forward(lr, np.zeros(2), tilde), 1000.0 * tilde)
    lr1 = _with_output_bias(meta.lr, 1.0)
    assert np.allclose(mn.lrnet_forward(lr1, np.zeros(2), np.full(2, 1e-3)), 1e-3)
    assert np.array_equal(mn.lrnet_forward(meta.lr, np.ones(2), np.zeros(2)), np.zeros(2))


def test_input_arity_checked():
    meta = init_meta(2, 1, seed=0)
    with pytest.raises(ValueError):
        mn.hyper_outputs(meta, np.zeros(2), np.zeros(4))
    with pytest.raises(ValueError):
        mn.hyper_outputs(meta, np.zeros(1), np.zeros(3))


def test_zero_upstream_gives_zero_gradients():
    meta = init_meta(2, 2, seed=0)
    out = mn.hyper_outputs(meta, np.ones(2), np.ones(4))
    g = mn.metanet_vjp(meta, out, np.zeros(2), np.zeros(4))
    assert not np.any(g.to_vector())


def test_vjp_matches_finite_differences():
    rng = np.random.default_rng(3)
    meta = init_meta(2, 2, seed=1, base_lr=0.05, gain=0.3)
    xi, stats = rng.uniform(0, 2, size=2), rng.uniform(0, 2, size=4)
    gb, ge = rng.normal(size=2), rng.normal(size=4)

    def objective(vec):
        m = meta.from_vector(vec)
        out = mn.hyper_outputs(m, xi, stats)
        return float(gb @ out.beta + ge @ out.eta)

    out = mn.hyper_outputs(meta, xi, stats)
    assert np.all((out.beta > 0) & (out.beta < 1))  # interior, so STE equals the true derivative
    analytic = mn.metanet_vjp(meta, out, gb, ge).to_vector()
    base = meta.to_vector()
    idx = rng.choice(base.size, size=200, replace=False)
    idx = np.concatenate([idx, np.arange(base.size - 4, base.size)])
    for k in idx:
        up, down = base.copy(), base.copy()
        up[k] += 1e-6
        down[k] -= 1e-6
        fd = (objective(up) - objective(down)) / 2e-6
        assert fd == pytest.approx(analytic[k], rel=1e-4, abs=1e-8)


def test_vector_roundtrip_and_blocks():
    meta = init_meta(3, 2, seed=0)
    back = meta.from_vector(meta.to_vector())
    assert np.array_equal(back.to_vector(), meta.to_vector())
    assert sum(meta.block_sizes()) == meta.to_vector().size
    with pytest.raises(ValueError):
        meta.from_vector(np.zeros(3))


def test_checkpoint_roundtrip(tmp_path):
    meta = init_meta(3, 2, seed=0)
    meta.save(tmp_path / "meta.json")
    back = MetaParams.load(tmp_path / "meta.json")
    assert np.array_equal(back.to_vector(), meta.to_vector())
    assert back.checksum() == meta.checksum()


def test_checkpoint_missing_array(tmp_path):
    records = init_meta(1, 1, seed=0).to_records()[:-1]
    with pytest.raises(ValueError, match="eta_tilde"):
        MetaParams.from_records(records)

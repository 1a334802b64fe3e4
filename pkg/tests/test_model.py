import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exvae import model
from exvae.errors import ContractError
from exvae.numerics import autodiff as ad

from .helpers import central_fd, rel_err

_TINY = model.init_params(5, 3, np.random.default_rng(0), hidden=4, dtype=np.float64)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _zero_params(d_x, d_z, hidden):
    return {k: np.zeros(s) for k, s in model.param_shapes(d_x, d_z, hidden).items()}


def test_shapes_and_init():
    p = model.init_params(784, 40, np.random.default_rng(1))
    assert p["enc.h1.W"].shape == (784, 300)
    assert p["dec.out.W"].shape == (300, 784)
    assert p["prior.log_sigma2"].shape == ()
    assert model.sigma2(p) == 1.0
    assert np.abs(p["enc.h1.W"]).max() <= 1 / math.sqrt(784)
    assert not p["enc.h1.b"].any()
    assert model.dims(p) == (784, 40)


def test_zero_network():
    p = _zero_params(4, 2, 3)
    g = model.encode(p, np.full(4, 0.3))
    np.testing.assert_array_equal(g.mean, 0.0)
    np.testing.assert_array_equal(g.log_var, 0.0)
    np.testing.assert_array_equal(model.prior_encode(p, np.full(4, 0.3)), 0.0)
    np.testing.assert_array_equal(model.decode(p, np.ones(2)), 0.5)


def _hand_gated(x, W, b, Wg, bg):
    out = []
    for j in range(len(b)):
        a = sum(x[i] * W[i][j] for i in range(len(x))) + b[j]
        g = sum(x[i] * Wg[i][j] for i in range(len(x))) + bg[j]
        out.append(a * _sig(g))
    return out


def test_encode_decode_match_hand_computation():
    p = model.init_params(2, 2, np.random.default_rng(7), hidden=2, dtype=np.float64)
    for k in p:
        if k.endswith(".b") or k.endswith(".bg"):
            p[k] = np.array([0.1, -0.2]) if p[k].shape == (2,) else p[k]
    x = [0.25, 0.75]
    L = lambda pre, h: _hand_gated(h, p[pre + ".W"].tolist(), p[pre + ".b"].tolist(),
                                   p[pre + ".Wg"].tolist(), p[pre + ".bg"].tolist())
    h = L("enc.h2", L("enc.h1", x))
    mean = [sum(h[i] * p["enc.mean.W"][i][j] for i in range(2)) + p["enc.mean.b"][j] for j in range(2)]
    lv = [sum(h[i] * p["enc.logvar.W"][i][j] for i in range(2)) + p["enc.logvar.b"][j] for j in range(2)]
    g = model.encode(p, np.array(x))
    np.testing.assert_allclose(g.mean, mean, rtol=1e-13)
    np.testing.assert_allclose(g.log_var, lv, rtol=1e-13)
    z = [0.5, -1.0]
    hd = L("dec.h2", L("dec.h1", z))
    probs = [_sig(sum(hd[i] * p["dec.out.W"][i][j] for i in range(2)) + p["dec.out.b"][j]) for j in range(2)]
    np.testing.assert_allclose(model.decode(p, np.array(z)), probs, rtol=1e-13)


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=5, max_size=5), st.integers(1, 4))
def test_shared_mean_bit_exact(row, reps):
    x = np.array([row] * reps)
    np.testing.assert_array_equal(model.prior_encode(_TINY, x), model.encode(_TINY, x).mean)


def test_shape_errors():
    with pytest.raises(ContractError):
        model.encode(_TINY, np.zeros(4))
    with pytest.raises(ContractError):
        model.decode(_TINY, np.zeros(2))
    g = model.encode(_TINY, np.zeros(5))
    with pytest.raises(ContractError):
        model.reparam_sample(g, np.zeros(2))


def test_reparam():
    g = model.DiagGaussian(np.array([1.0, -2.0]), np.array([0.0, math.log(4.0)]))
    np.testing.assert_array_equal(model.reparam_sample(g, np.zeros(2)), g.mean)
    g0 = model.DiagGaussian(np.array([1.0, -2.0]), np.zeros(2))
    np.testing.assert_array_equal(model.reparam_sample(g0, np.array([0.5, 3.0])), [1.5, 1.0])
    eps = np.random.default_rng(0).standard_normal((10**5, 2))
    v = model.reparam_sample(g, eps).var(axis=0)
    np.testing.assert_allclose(v, [1.0, 4.0], rtol=0.05)


def test_bernoulli_log_prob_examples():
    hi = np.full(784, 1 - 1e-7)
    # binary target at the upper clamp: only the x log(mu) term survives
    assert model.bernoulli_log_prob(np.ones(784), hi) == pytest.approx(-7.84e-5, rel=1e-4)
    assert model.bernoulli_log_prob(np.ones(784), np.full(784, 0.5)) == pytest.approx(-543.4273, abs=1e-4)
    rng = np.random.default_rng(2)
    x, mu = rng.random(30), rng.uniform(0.01, 0.99, 30)
    want = sum(a * math.log(m) + (1 - a) * math.log(1 - m) for a, m in zip(x, mu))
    assert model.bernoulli_log_prob(x, mu) == pytest.approx(want, rel=1e-13)


def test_decode_range_and_binary_loglik_nonpositive():
    rng = np.random.default_rng(3)
    p = model.init_params(5, 3, rng, hidden=4, dtype=np.float64)
    for k in p:
        p[k] = p[k] * 50
    probs = model.decode(p, rng.normal(scale=10, size=(200, 3)))
    assert probs.min() >= 1e-7 and probs.max() <= 1 - 1e-7
    x = (rng.random(probs.shape) < 0.5).astype(float)
    assert (model.bernoulli_log_prob(x, probs) <= 0).all()


def test_decoder_gradients_match_fd():
    rng = np.random.default_rng(4)
    p = model.init_params(5, 3, rng, hidden=4, dtype=np.float64)
    x = (rng.random((3, 5)) < 0.5).astype(float)
    z = rng.normal(size=(3, 3))
    P = model.leaves(p)
    g = ad.backward(ad.tsum(model.bernoulli_log_prob_t(x, model.decode_t(P, z))), wrt=P)
    for name in [k for k in p if k.startswith("dec.")]:
        def f(v, name=name):
            q = dict(p)
            q[name] = v
            return float(np.sum(model.bernoulli_log_prob(x, model.decode(q, z))))
        assert rel_err(g[name], central_fd(f, p[name])) < 1e-4, name

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exvae import augment, model
from exvae.config import AugConfig
from exvae.data import LabeledDataset
from exvae.errors import ContractError

from .toys import tiny_vae

VAE = tiny_vae(d_x=6)
CLF = augment.init_classifier(6, 7, np.random.default_rng(0))


def scalar_loss(params, X, Xs, y, lam, alpha):
    """Row-by-row reference: smoothed cross-entropy with plain loops."""
    def logprobs(x):
        h = list(x)
        L = sum(1 for k in params if k.endswith(".W"))
        for i in range(1, L + 1):
            W, b = params[f"clf.l{i}.W"], params[f"clf.l{i}.b"]
            h = [sum(h[a] * W[a][j] for a in range(len(h))) + b[j] for j in range(len(b))]
            if i < L:
                h = [max(v, 0.0) for v in h]
        m = max(h)
        lse = m + math.log(sum(math.exp(v - m) for v in h))
        return [v - lse for v in h]

    total = 0.0
    for i, label in enumerate(y):
        tgt = [alpha / 9] * 10
        tgt[label] = 1 - alpha
        lr, ls = logprobs(X[i]), logprobs(Xs[i])
        total -= lam * sum(t * v for t, v in zip(tgt, lr)) + (1 - lam) * sum(t * v for t, v in zip(tgt, ls))
    return total


def test_smooth_targets():
    t = augment.smooth_targets(np.array([2]), 0.1)
    assert t[0, 2] == pytest.approx(0.9) and t[0, 0] == pytest.approx(0.1 / 9)
    assert t.sum() == pytest.approx(1.0)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_label_transfer_exact(seed, n):
    rng = np.random.default_rng(seed)
    x, y = rng.random((n, 6)), rng.integers(0, 10, n)
    xs, ys = augment.synth_minibatch(VAE, x, y, rng)
    np.testing.assert_array_equal(ys, y)
    assert xs.shape == x.shape and (xs > 0).all() and (xs < 1).all()


def test_synth_degenerate_and_deterministic():
    p = dict(VAE)
    p["prior.log_sigma2"] = np.array(-60.0)
    x = np.random.default_rng(0).random((4, 6))
    xs, _ = augment.synth_minibatch(p, x, np.arange(4), np.random.default_rng(0))
    np.testing.assert_allclose(xs, model.decode(p, model.prior_encode(p, x)), rtol=1e-12)
    a = augment.synth_minibatch(VAE, x, np.arange(4), np.random.default_rng(3))[0]
    b = augment.synth_minibatch(VAE, x, np.arange(4), np.random.default_rng(3))[0]
    np.testing.assert_array_equal(a, b)


def test_mixed_loss_oracle_and_limits():
    rng = np.random.default_rng(1)
    X, Xs, y = rng.random((4, 6)), rng.random((4, 6)), rng.integers(0, 10, 4)
    for lam in (0.0, 0.3, 1.0):
        assert augment.mixed_loss(CLF, X, Xs, y, lam, 0.1) == pytest.approx(scalar_loss(CLF, X, Xs, y, lam, 0.1), rel=1e-12)
    assert augment.mixed_loss(CLF, X, Xs, y, 1.0) == augment.mixed_loss(CLF, X, None, y, 1.0)
    assert augment.mixed_loss(CLF, X, Xs, y, 0.0) == augment.mixed_loss(CLF, Xs, None, y, 1.0)
    with pytest.raises(ContractError):
        augment.mixed_loss(CLF, X, Xs[:3], y, 0.5)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_mixed_loss_affine_in_lambda(seed, l1, l2):
    rng = np.random.default_rng(seed)
    X, Xs, y = rng.random((3, 6)), rng.random((3, 6)), rng.integers(0, 10, 3)
    l0 = augment.mixed_loss(CLF, X, Xs, y, 0.0)
    l_1 = augment.mixed_loss(CLF, X, Xs, y, 1.0)
    for lam in (l1, l2):
        want = lam * l_1 + (1 - lam) * l0
        assert augment.mixed_loss(CLF, X, Xs, y, lam) == pytest.approx(want, rel=1e-12, abs=1e-12)


def _data(seed=0, n=300):
    rng = np.random.default_rng(seed)
    proto = rng.random((10, 6))
    y = rng.integers(0, 10, n)
    X = np.clip(proto[y] + 0.1 * rng.normal(size=(n, 6)), 0, 1)
    return (LabeledDataset(X[:200], y[:200]), LabeledDataset(X[200:250], y[200:250]),
            LabeledDataset(X[250:], y[250:]))


def test_lambda_one_never_calls_vae_and_matches_plain():
    tr, va, te = _data()
    calls = []

    def spy(*a):
        calls.append(1)
        return augment.synth_minibatch(*a)

    cfg = AugConfig(seed=4, lam=1.0, hidden=16, epochs=3, batch_size=20)
    with_vae = augment.train_classifier(tr, va, VAE, cfg, test=te, synth=spy)
    plain = augment.train_classifier(tr, va, None, cfg, test=te)
    assert calls == [] and with_vae.vae_calls == 0
    for k in plain.params:
        np.testing.assert_array_equal(with_vae.params[k], plain.params[k])
    assert with_vae.curve == plain.curve and with_vae.test_error == plain.test_error


def test_augmented_training_deterministic_and_union(tmp_path):
    tr, va, te = _data()
    cfg = AugConfig(seed=1, lam=0.5, hidden=16, epochs=2, batch_size=20)
    a = augment.train_classifier(tr, va, VAE, cfg, test=te, log_path=tmp_path / "a.jsonl")
    b = augment.train_classifier(tr, va, VAE, cfg, test=te, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert a.test_error == b.test_error and a.vae_calls == 2 * 10
    u = augment.train_classifier(tr, va, VAE, AugConfig(seed=1, lam=0.5, hidden=16, epochs=1, batch_size=20, union=True))
    assert u.vae_calls == 13 and "valid_error" not in u.curve[0]
    with pytest.raises(ContractError):
        augment.train_classifier(tr, va, None, cfg)

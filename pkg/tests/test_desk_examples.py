"""Behaviour checks that need a model trained at desk scale.

They reuse the exemplar seed-1 run from ``tests/desk.py`` (trained once, then
cached), so they are cheap after the acceptance suite has run.
"""

import json
from pathlib import Path

import numpy as np

from exvae import model, sampler
from exvae.numerics import io as ckpt_io

from . import desk


def _run():
    summary = desk.vae_run("exemplar", 1)
    ckpt = Path(summary["checkpoint"])
    log = [json.loads(l) for l in (ckpt.parent / "train_log.jsonl").read_text().splitlines()]
    params = {k: np.asarray(v, dtype=np.float64) for k, v in ckpt_io.load(ckpt).items()}
    return log, params


def test_validation_elbo_early_progress():
    log, _ = _run()
    valid = [r["valid_elbo"] for r in log]
    assert all(b > a for a, b in zip(valid[:4], valid[1:5]))
    assert valid[29] - valid[0] > 20


def test_noise_chain_improves_reconstruction_score():
    _, p = _run()

    def score(x):
        return model.bernoulli_log_prob(x, model.decode(p, model.prior_encode(p, x)))

    starts, ends = [], []
    for s in range(20):
        rng = np.random.default_rng(500 + s)
        seed_img = rng.random(784)
        chain = sampler.iterate(p, seed_img, 3, rng)
        starts.append(score(seed_img))
        ends.append(score(chain.images[-1]))
    assert np.mean(ends) > np.mean(starts)

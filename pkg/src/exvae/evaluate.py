"""Post-hoc evaluation: importance-weighted bound, single-sample ELBO split,
active latent dimensions and kNN classification on encoder means."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model
from .errors import ContractError
from .numerics import autodiff as ad
from .prior import MixtureView, log_mixture_density
from .trainer import evaluate_elbo

LOG_2PI = math.log(2.0 * math.pi)


def _log_prior(z: np.ndarray, view: MixtureView | None) -> np.ndarray:
    if view is None:
        return -0.5 * np.sum(LOG_2PI + z ** 2, axis=1)
    return log_mixture_density(z, view)


def log_weights(x: np.ndarray, params, view: MixtureView | None, eps: np.ndarray) -> np.ndarray:
    """log p(x|z_s) + log p(z_s) - log q(z_s|x) for z_s = mu + sigma * eps_s."""
    g = model.encode(params, x)
    g = model.DiagGaussian(g.mean.astype(np.float64), g.log_var.astype(np.float64))
    z = model.reparam_sample(g, eps)
    probs = model.decode(params, z)
    return model.bernoulli_log_prob(np.broadcast_to(x, probs.shape), probs) + _log_prior(z, view) - g.log_prob(z)


def iwae_bound(x, params, view: MixtureView | None, S: int, rng: np.random.Generator,
               chunk: int = 500):
    """Importance-weighted lower bound on log p(x) with ``S`` posterior samples.

    ``view`` is the full exemplar mixture over all training exemplars, or
    ``None`` for the standard Gaussian prior.  One row gives a float, a batch
    of rows gives an array.
    """
    if S < 1:
        raise ContractError(f"S must be at least 1, got {S}")
    x = np.asarray(x, dtype=np.float64)
    rows = np.atleast_2d(x)
    d_z = model.dims(params)[1]
    out = np.empty(len(rows))
    for r, xr in enumerate(rows):
        lw = np.empty(S)
        for s in range(0, S, chunk):
            n = min(chunk, S - s)
            lw[s:s + n] = log_weights(xr, params, view, rng.standard_normal((n, d_z)))
        out[r] = ad.log_sum_exp(lw) - math.log(S)
    return float(out[0]) if x.ndim == 1 else out


def elbo_decompose(x: np.ndarray, params, view: MixtureView | None, rng: np.random.Generator):
    """(mean KL, mean negative reconstruction) from one posterior sample per row."""
    terms = elbo_terms(x, params, view, rng)
    return float(terms["kl"].mean()), float(-terms["recon"].mean())


def elbo_terms(x: np.ndarray, params, view: MixtureView | None, rng: np.random.Generator) -> dict:
    return evaluate_elbo(params, np.atleast_2d(np.asarray(x, dtype=np.float64)), view, rng)


def active_dimensions(means: np.ndarray, threshold: float = 0.01) -> int:
    """Number of latent dims whose encoder-mean population variance exceeds ``threshold``."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if means.shape[0] == 0:
        raise ContractError("active_dimensions needs a non-empty dataset")
    return int(np.sum(means.var(axis=0) > threshold))


def knn_predict(train_means, train_labels, test_means, k: int = 5) -> np.ndarray:
    train_means = np.asarray(train_means, dtype=np.float64)
    test_means = np.atleast_2d(np.asarray(test_means, dtype=np.float64))
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if k < 1 or k > len(train_means):
        raise ContractError(f"k must be in [1, {len(train_means)}], got {k}")
    n_cls = int(train_labels.max()) + 1
    sq_tr = np.einsum("ij,ij->i", train_means, train_means)
    pred = np.empty(len(test_means), dtype=np.int64)
    for s in range(0, len(test_means), 1000):
        q = test_means[s:s + 1000]
        d = np.einsum("ij,ij->i", q, q)[:, None] - 2.0 * q @ train_means.T + sq_tr[None, :]
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        votes = np.zeros((len(q), n_cls), dtype=np.int64)
        np.add.at(votes, (np.arange(len(q))[:, None], train_labels[nn]), 1)
        # argmax returns the first maximum, i.e. the smallest label on ties
        pred[s:s + 1000] = votes.argmax(axis=1)
    return pred


def knn_classify(train_means, train_labels, test_means, test_labels, k: int = 5) -> float:
    """Majority-vote kNN error in percent; vote ties go to the smallest label."""
    pred = knn_predict(train_means, train_labels, test_means, k)
    test_labels = np.asarray(test_labels)
    return 100.0 * float(np.mean(pred != test_labels))


@dataclass
class EvalReport:
    iwae: list[float]
    iwae_mean: float
    kl_mean: float
    recon_mean: float
    active_dims: int
    d_z: int
    iwae_samples: int
    knn_error: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def export_latents_csv(path, means: np.ndarray, labels=None) -> None:
    means = np.atleast_2d(means)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((["label"] if labels is not None else []) + [f"z{j}" for j in range(means.shape[1])])
        for i, row in enumerate(means):
            w.writerow(([int(labels[i])] if labels is not None else []) + [repr(float(v)) for v in row])

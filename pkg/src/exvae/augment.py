"""Generative data augmentation: a ReLU MLP classifier trained on a weighted
mix of real images and label-preserving exemplar-prior samples."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import model
from .config import AugConfig, substream
from .data import LabeledDataset
from .errors import ContractError, NumericError
from .numerics import autodiff as ad
from .numerics.optim import OptimizerState, gn_adam_step

N_CLASSES = 10


def init_classifier(d_x: int, hidden: int, rng: np.random.Generator, n_classes: int = N_CLASSES,
                    layers: int = 2) -> dict[str, np.ndarray]:
    sizes = [d_x] + [hidden] * layers + [n_classes]
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), 1):
        bound = 1.0 / math.sqrt(a)
        params[f"clf.l{i}.W"] = rng.uniform(-bound, bound, size=(a, b))
        params[f"clf.l{i}.b"] = np.zeros(b)
    return params


def _n_layers(params) -> int:
    return sum(1 for k in params if k.endswith(".W"))


def logits_t(P, x) -> ad.Tensor:
    h = x if isinstance(x, ad.Tensor) else ad.const(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    L = _n_layers(P)
    for i in range(1, L + 1):
        h = h @ P[f"clf.l{i}.W"] + P[f"clf.l{i}.b"]
        if i < L:
            h = ad.relu(h)
    return h


def predict(params, x: np.ndarray, chunk: int = 2000) -> np.ndarray:
    P = {k: ad.const(v) for k, v in params.items()}
    return np.concatenate([logits_t(P, x[s:s + chunk]).data.argmax(1) for s in range(0, len(x), chunk)])


def error_rate(params, ds: LabeledDataset) -> float:
    return 100.0 * float(np.mean(predict(params, ds.images) != ds.labels))


def smooth_targets(labels: np.ndarray, alpha: float, n_classes: int = N_CLASSES) -> np.ndarray:
    """1 - alpha on the true class, alpha spread evenly over the other classes."""
    labels = np.asarray(labels)
    t = np.full((len(labels), n_classes), alpha / (n_classes - 1))
    t[np.arange(len(labels)), labels] = 1.0 - alpha
    return t


def _xent_t(P, x, targets: np.ndarray) -> ad.Tensor:
    z = logits_t(P, x)
    logp = z - ad.logsumexp(z, axis=1, keepdims=True)
    return -ad.tsum(logp * ad.const(targets))


def mixed_loss_t(P, x: np.ndarray, x_syn: np.ndarray | None, labels: np.ndarray, lam: float,
                 alpha: float) -> ad.Tensor:
    if x_syn is not None and len(x_syn) != len(x):
        raise ContractError(f"real batch has {len(x)} rows, synthetic batch {len(x_syn)}")
    targets = smooth_targets(labels, alpha)
    if lam == 1.0:
        # the synthetic term has zero weight; skipping it keeps this path identical to plain training
        return _xent_t(P, x, targets)
    if x_syn is None:
        raise ContractError("lam < 1 needs a synthetic batch")
    if lam == 0.0:
        return _xent_t(P, x_syn, targets)
    return lam * _xent_t(P, x, targets) + (1.0 - lam) * _xent_t(P, x_syn, targets)


def mixed_loss(params, x, x_syn, labels, lam: float, alpha: float = 0.1) -> float:
    """Summed label-smoothed cross-entropy: lam on real rows, 1 - lam on synthetic rows."""
    if not (0.0 <= lam <= 1.0 and 0.0 <= alpha <= 1.0):
        raise ContractError(f"lam and alpha must be in [0, 1], got {lam}, {alpha}")
    P = {k: ad.const(v) for k, v in params.items()}
    return float(mixed_loss_t(P, x, x_syn, labels, lam, alpha).data)


def synth_minibatch(vae_params, x: np.ndarray, labels: np.ndarray, rng: np.random.Generator):
    """One draw z ~ N(mu(x_i), sigma^2 I) per row, decoded to pixel means; labels copied."""
    x = np.atleast_2d(x)
    if len(x) == 0:
        raise ContractError("cannot synthesize from an empty batch")
    d_z = model.dims(vae_params)[1]
    mu = model.prior_encode(vae_params, x).astype(np.float64)
    z = mu + math.sqrt(model.sigma2(vae_params)) * rng.standard_normal((len(x), d_z))
    return model.decode(vae_params, z).astype(np.float64), np.array(labels, copy=True)


@dataclass
class ClassifierResult:
    params: dict[str, np.ndarray]
    curve: list[dict] = field(default_factory=list)
    test_error: float | None = None
    vae_calls: int = 0


def train_classifier(train: LabeledDataset, valid: LabeledDataset | None, vae_params, cfg: AugConfig,
                     test: LabeledDataset | None = None, log_path=None, synth=None) -> ClassifierResult:
    """Minibatch training on the mixed objective with gradient-normalized Adam.

    ``synth`` defaults to :func:`synth_minibatch`; it is never called when
    ``cfg.lam == 1``.  In union mode the validation rows join the training set.
    """
    synth = synth_minibatch if synth is None else synth
    if cfg.union and valid is not None:
        train = LabeledDataset(np.vstack([train.images, valid.images]),
                               np.concatenate([train.labels, valid.labels]), "train")
        valid = None
    if cfg.lam < 1.0 and vae_params is None:
        raise ContractError("lam < 1 needs trained VAE parameters")
    X, y = np.asarray(train.images, dtype=np.float64), train.labels
    params = init_classifier(X.shape[1], cfg.hidden, substream(cfg.seed, "clf-init"))
    opt = OptimizerState.for_params(params, lr=cfg.lr)
    rng = substream(cfg.seed, "clf-train")
    syn_rng = substream(cfg.seed, "clf-synth")
    result = ClassifierResult(params)
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(X))
            total = 0.0
            for b, s in enumerate(range(0, len(X), cfg.batch_size)):
                idx = order[s:s + cfg.batch_size]
                xb, yb = X[idx], y[idx]
                x_syn = None
                if cfg.lam < 1.0:
                    x_syn, y_syn = synth(vae_params, xb, yb, syn_rng)
                    result.vae_calls += 1
                    if not np.array_equal(y_syn, yb):
                        raise ContractError("synthetic labels must match their sources")
                P = {k: ad.leaf(v, k) for k, v in params.items()}
                loss = mixed_loss_t(P, xb, x_syn, yb, cfg.lam, cfg.smoothing)
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite classifier loss at epoch {epoch} batch {b}", block="loss")
                gn_adam_step(params, ad.backward(loss, wrt=P), opt)
                total += float(loss.data)
            rec = {"epoch": epoch, "train_loss": float(f"{total / len(X):.10g}")}
            if valid is not None:
                rec["valid_error"] = error_rate(params, valid)
            result.curve.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh:
            fh.close()
    if test is not None:
        result.test_error = error_rate(params, test)
    return result

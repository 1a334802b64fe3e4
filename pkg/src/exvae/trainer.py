"""Exemplar VAE training: subsampled leave-one-out exemplar prior, optional
kNN truncation through the latent cache, KL annealing and early stopping.
The Gaussian-prior VAE baseline shares the same loop."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import model
from .cache import ExemplarCache, cache_init
from .config import TrainConfig, substream, to_dict
from .data import LabeledDataset, dynamic_binarize
from .errors import ContractError, NumericError
from .numerics import autodiff as ad
from .numerics import io as ckpt_io
from .numerics.optim import OptimizerState, gn_adam_step
from .prior import MixtureView, log_mixture_density, log_mixture_t

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


def subsample_indices(n: int, i: int | None, m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random size-``m`` subset of ``range(n)`` excluding ``i`` (sorted)."""
    pool = n if i is None else n - 1
    if m < 1 or m > pool:
        raise ContractError(f"subset size M={m} must be in [1, {pool}] for N={n}")
    pick = rng.choice(pool, size=m, replace=False)
    if i is not None:
        pick = pick + (pick >= i)
    return np.sort(pick)


def subsample_mask(n: int, idx: np.ndarray | None, m: int, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    """Boolean (B x n) membership mask, one independent subset per row.

    ``idx`` holds each row's own index, which is never selected (leave-one-out);
    pass ``None`` to allow self-selection.
    """
    B = len(idx) if idx is not None else int(batch)
    pool = n if idx is None else n - 1
    if m < 1 or m > pool:
        raise ContractError(f"subset size M={m} must be in [1, {pool}] for N={n}")
    mask = np.ones((B, n), dtype=bool)
    rows = np.arange(B)
    if m < pool:
        # the m smallest of iid uniform keys form a uniform m-subset
        keys = rng.random((B, n))
        if idx is not None:
            keys[rows, idx] = np.inf
        keep = np.argpartition(keys, m - 1, axis=1)[:, :m]
        mask[:] = False
        mask[rows[:, None], keep] = True
    if idx is not None:
        mask[rows, idx] = False
    return mask


def kl_anneal_weight(epoch: int, anneal_epochs: int = 100) -> float:
    if epoch < 1:
        raise ContractError(f"epochs are 1-based, got {epoch}")
    return min(1.0, epoch / anneal_epochs)


@dataclass
class BatchTerms:
    objective: ad.Tensor          # annealed, per row
    raw: np.ndarray               # beta = 1, per row
    recon: np.ndarray
    kl: np.ndarray
    mean: np.ndarray              # posterior means of the batch rows
    neighbours: np.ndarray        # exemplar indices whose means were recomputed
    neighbour_means: np.ndarray
    fallbacks: int = 0


def _component_sets(cfg: TrainConfig, cache: ExemplarCache | None, allowed: np.ndarray,
                    query: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-row exemplar sets as (union indices, row x union membership, fallbacks)."""
    sizes = allowed.sum(1)
    K = cfg.k_neighbors
    if K == 0 or K >= sizes.max():
        union = np.flatnonzero(allowed.any(0))
        return union, allowed[:, union], 0
    if cache is None:
        raise ContractError("kNN truncation needs an exemplar cache")
    if cfg.knn_mode == "within":
        nn = cache.knn_batch(query, K, allowed)
    else:
        nn = cache.knn_batch(query, K, None)
        rows = np.broadcast_to(np.arange(len(nn))[:, None], nn.shape)
        hit = allowed[rows, np.maximum(nn, 0)] & (nn >= 0)
        nn = np.where(hit, nn, -1)
    empty = ~(nn >= 0).any(1)
    fallbacks = int(empty.sum())
    if fallbacks:
        nn[empty, 0] = cache.knn_batch(query[empty], 1, allowed[empty])[:, 0]
    union = np.unique(nn[nn >= 0])
    member = np.zeros((len(nn), len(union)), dtype=bool)
    rows, cols = np.nonzero(nn >= 0)
    member[rows, np.searchsorted(union, nn[rows, cols])] = True
    return union, member, fallbacks


def exemplar_batch_terms(P, xb: np.ndarray, allowed: np.ndarray, exemplars: np.ndarray,
                         cache: ExemplarCache | None, cfg: TrainConfig, eps: np.ndarray,
                         beta: float) -> BatchTerms:
    """Single-sample exemplar-prior ELBO terms for a batch.

    ``allowed[b]`` is row b's exemplar subset; the prior over it is normalized by
    its size M_b.  With kNN truncation only the retrieved members contribute,
    which lower-bounds the untruncated value.
    """
    mu, lv = model.encode_t(P, xb)
    z = model.reparam_sample_t(mu, lv, eps)
    query = mu.data if cfg.knn_query == "mean" else z.data
    union, member, fallbacks = _component_sets(cfg, cache, allowed, query)
    means = model.prior_mean_t(P, exemplars[union])
    mask_add = np.where(member, 0.0, -np.inf)
    log_m = np.log(allowed.sum(1).astype(np.float64))
    log_prior = log_mixture_t(z, means, P["prior.log_sigma2"], log_m, mask_add)
    log_q = model.gaussian_log_prob_t(z, mu, lv)
    recon = model.bernoulli_log_prob_t(xb, model.decode_t(P, z))
    kl = log_q - log_prior
    objective = recon - beta * kl
    return BatchTerms(objective, recon.data - kl.data, recon.data, kl.data, mu.data, union, means.data, fallbacks)


def gaussian_batch_terms(P, xb: np.ndarray, eps: np.ndarray, beta: float) -> BatchTerms:
    mu, lv = model.encode_t(P, xb)
    z = model.reparam_sample_t(mu, lv, eps)
    log_prior = -0.5 * (LOG_2PI + ad.square(z)).sum(axis=-1)
    log_q = model.gaussian_log_prob_t(z, mu, lv)
    recon = model.bernoulli_log_prob_t(xb, model.decode_t(P, z))
    kl = log_q - log_prior
    objective = recon - beta * kl
    empty = np.zeros(0, dtype=np.int64)
    return BatchTerms(objective, recon.data - kl.data, recon.data, kl.data, mu.data, empty, np.zeros((0, mu.shape[1])))


def elbo_exemplar(x_i, i, params, cache, pi, config: TrainConfig, rng, exemplars, beta: float = 1.0):
    """Single-sample objective for one data point.

    Returns ``(objective, {"recon": ..., "kl": ..., "neighbours": ...})``.
    ``pi`` is the exemplar index subset (all exemplars at evaluation time).
    """
    n = len(exemplars)
    allowed = np.zeros((1, n), dtype=bool)
    allowed[0, np.asarray(pi)] = True
    if i is not None and config.loo and allowed[0, i]:
        raise ContractError(f"exemplar {i} appears in its own subset")
    d_z = model.dims(params)[1]
    eps = rng.standard_normal((1, d_z))
    P = model.consts(params)
    t = exemplar_batch_terms(P, np.atleast_2d(x_i), allowed, np.asarray(exemplars), cache, config, eps, beta)
    return float(t.objective.data[0]), {"recon": float(t.recon[0]), "kl": float(t.kl[0]),
                                        "neighbours": t.neighbours, "fallbacks": t.fallbacks}


def elbo_gaussian(x_i, params, rng, beta: float = 1.0):
    d_z = model.dims(params)[1]
    eps = rng.standard_normal((1, d_z))
    t = gaussian_batch_terms(model.consts(params), np.atleast_2d(x_i), eps, beta)
    return float(t.objective.data[0]), {"recon": float(t.recon[0]), "kl": float(t.kl[0])}


def evaluate_elbo(params, x: np.ndarray, view: MixtureView | None, rng: np.random.Generator,
                  chunk: int = 500) -> dict[str, np.ndarray]:
    """Single-sample ELBO per row under ``view`` (the untruncated exemplar
    mixture, no LOO, no subsampling) or the N(0, I) prior when ``view`` is None."""
    P = model.consts(params)
    d_z = model.dims(params)[1]
    eps = rng.standard_normal((len(x), d_z))
    recon, kl = np.empty(len(x)), np.empty(len(x))
    for s in range(0, len(x), chunk):
        mu, lv = model.encode_t(P, x[s:s + chunk])
        g = model.DiagGaussian(mu.data.astype(np.float64), lv.data.astype(np.float64))
        z = model.reparam_sample(g, eps[s:s + chunk])
        probs = model.decode(params, z)
        recon[s:s + chunk] = model.bernoulli_log_prob(x[s:s + chunk], probs)
        if view is None:
            lp = -0.5 * np.sum(LOG_2PI + z ** 2, axis=1)
        else:
            lp = log_mixture_density(z, view)
        kl[s:s + chunk] = g.log_prob(z) - lp
    return {"elbo": recon - kl, "recon": recon, "kl": kl}


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_elbo: float = -np.inf
    cache: ExemplarCache | None = None
    optimizer: OptimizerState | None = None


def _round(x: float) -> float:
    return float(f"{float(x):.10g}")


class Trainer:
    """Stateful training loop; :func:`train` is the one-call entry point."""

    def __init__(self, train_set: LabeledDataset, valid_set: LabeledDataset, config: TrainConfig,
                 out_dir: str | None = None, instrument=None):
        self.cfg = config
        self.train_set, self.valid_set = train_set, valid_set
        self.out_dir = out_dir
        self.instrument = instrument
        dtype = np.dtype(config.dtype)
        self.X = np.asarray(train_set.images, dtype=dtype)
        self.N, d_x = self.X.shape
        self.params = model.init_params(d_x, config.d_z, substream(config.seed, "init"), config.hidden, dtype)
        self.opt = OptimizerState.for_params(self.params, lr=config.lr)
        self.rng = substream(config.seed, "train")
        # fixed binarization of validation targets so the validation ELBO is comparable across epochs
        self.valid_x = dynamic_binarize(np.asarray(valid_set.images, dtype=np.float64), substream(config.seed, "valid-binarize"))
        self.exemplar = config.prior == "exemplar"
        self.M = config.subset_size(self.N) if self.exemplar else 0
        self.cache = cache_init(self.X, self.params) if self.exemplar and self._uses_knn() else None

    def _uses_knn(self) -> bool:
        return 0 < self.cfg.k_neighbors < self.M

    def validation(self) -> dict[str, float]:
        view = None
        if self.exemplar:
            means = model.prior_encode_batched(self.params, self.X).astype(np.float64)
            view = MixtureView(means, model.sigma2(self.params))
        out = evaluate_elbo(self.params, self.valid_x, view, substream(self.cfg.seed, "valid-eps"))
        return {k: float(v.mean()) for k, v in out.items()}

    def run_epoch(self, epoch: int) -> dict[str, float]:
        cfg, rng = self.cfg, self.rng
        beta = kl_anneal_weight(epoch, cfg.anneal_epochs)
        order = rng.permutation(self.N)
        sums = {"raw": 0.0, "obj": 0.0, "recon": 0.0, "kl": 0.0}
        fallbacks = 0
        for b, s in enumerate(range(0, self.N, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            xb = dynamic_binarize(self.X[idx], rng)
            eps = rng.standard_normal((len(idx), cfg.d_z))
            P = model.leaves(self.params)
            if self.exemplar:
                allowed = subsample_mask(self.N, idx if cfg.loo else None, self.M, rng, batch=len(idx))
                if self.instrument is not None:
                    self.instrument(idx, allowed)
                terms = exemplar_batch_terms(P, xb, allowed, self.X, self.cache, cfg, eps, beta)
            else:
                terms = gaussian_batch_terms(P, xb, eps, beta)
            loss = -ad.mean(terms.objective)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {b}", block="loss")
            try:
                grads = ad.backward(loss, wrt=P)
            except NumericError as exc:
                raise NumericError(f"{exc} at epoch {epoch} batch {b}", block=exc.block) from None
            gn_adam_step(self.params, grads, self.opt)
            if self.cache is not None:
                self.cache.tick()
                self.cache.update(idx, terms.mean)
                self.cache.update(terms.neighbours, terms.neighbour_means)
            n = len(idx)
            sums["raw"] += float(terms.raw.sum())
            sums["obj"] += float(terms.objective.data.sum())
            sums["recon"] += float(terms.recon.sum())
            sums["kl"] += float(terms.kl.sum())
            fallbacks += terms.fallbacks
        rec = {k: v / self.N for k, v in sums.items()}
        rec["fallbacks"] = fallbacks
        rec["beta"] = beta
        return rec

    def checkpoint_blocks(self, with_state: bool = False) -> dict[str, np.ndarray]:
        blocks = dict(self.params)
        if with_state:
            for k in self.params:
                blocks[f"opt.m.{k}"] = self.opt.m[k]
                blocks[f"opt.v.{k}"] = self.opt.v[k]
            blocks["opt.step"] = np.array([self.opt.step], dtype=np.int64)
            if self.cache is not None:
                blocks.update(self.cache.dump())
        return blocks

    def fit(self) -> TrainResult:
        cfg = self.cfg
        result = TrainResult(params={k: v.copy() for k, v in self.params.items()}, cache=self.cache, optimizer=self.opt)
        log_fh = None
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            with open(os.path.join(self.out_dir, "config.json"), "w") as fh:
                json.dump(to_dict(cfg), fh, sort_keys=True, indent=1)
            log_fh = open(os.path.join(self.out_dir, "train_log.jsonl"), "w")
        waited = 0
        try:
            for epoch in range(1, cfg.max_epochs + 1):
                tr = self.run_epoch(epoch)
                va = self.validation()
                record = {
                    "epoch": epoch,
                    "train_elbo": _round(tr["raw"]),
                    "train_objective": _round(tr["obj"]),
                    "valid_elbo": _round(va["elbo"]),
                    "kl": _round(va["kl"]),
                    "recon": _round(va["recon"]),
                    "train_kl": _round(tr["kl"]),
                    "train_recon": _round(tr["recon"]),
                    "sigma2": _round(model.sigma2(self.params)),
                    "beta": tr["beta"],
                    "fallback_count": tr["fallbacks"],
                }
                result.log.append(record)
                log.info("epoch %d train %.3f valid %.3f", epoch, record["train_elbo"], record["valid_elbo"])
                if log_fh:
                    log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                    log_fh.flush()
                if va["elbo"] > result.best_valid_elbo:
                    result.best_valid_elbo = va["elbo"]
                    result.best_epoch = epoch
                    result.params = {k: v.copy() for k, v in self.params.items()}
                    waited = 0
                    if self.out_dir:
                        ckpt_io.save(os.path.join(self.out_dir, "best.ckpt"), self.checkpoint_blocks())
                else:
                    waited += 1
                    if waited >= max(cfg.patience, 1):
                        break
        finally:
            if log_fh:
                log_fh.close()
        if self.out_dir:
            ckpt_io.save(os.path.join(self.out_dir, "last.ckpt"), self.checkpoint_blocks(with_state=True))
        return result


def train(train_set: LabeledDataset, valid_set: LabeledDataset, config: TrainConfig,
          out_dir: str | None = None, instrument=None) -> TrainResult:
    """Train and return the best-validation parameters plus the per-epoch log."""
    return Trainer(train_set, valid_set, config, out_dir, instrument).fit()

"""Isotropic Gaussian mixtures over exemplars: the latent exemplar prior, its
kNN-truncated lower bound and the pixel-space Parzen window baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numerics import autodiff as ad
from .numerics.autodiff import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MixtureView:
    """Component means (rows), shared variance and the population size ``n``
    used in the ``-log n`` term.  ``n`` may exceed the row count when the
    mixture is truncated to a subset of its components."""

    means: np.ndarray
    sigma2: float
    n: int | None = None
    sqnorms: np.ndarray | None = None

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        n = means.shape[0] if self.n is None else int(self.n)
        if not self.sigma2 > 0:
            raise ContractError(f"sigma^2 must be positive, got {self.sigma2}")
        if means.shape[0] < 1:
            raise ContractError("mixture needs at least one component")
        if n < means.shape[0]:
            raise ContractError(f"population size {n} smaller than component count {means.shape[0]}")
        if not np.isfinite(means).all():
            raise ContractError("mixture means must be finite")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "n", n)
        if self.sqnorms is None:
            object.__setattr__(self, "sqnorms", np.einsum("ij,ij->i", means, means))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def size(self) -> int:
        return self.means.shape[0]


def _log_norm(d: int, sigma2: float, n: int) -> float:
    # -d log(sqrt(2 pi) sigma) - log n
    return -0.5 * d * (LOG_2PI + math.log(sigma2)) - math.log(n)


def log_mixture_density(z, view: MixtureView, chunk: int = 4096):
    """log of (1/n) sum_j N(z | mean_j, sigma^2 I) for one point or a batch of rows."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    if Z.shape[1] != view.dim:
        raise ContractError(f"point has dimension {Z.shape[1]}, mixture has {view.dim}")
    out = np.empty(Z.shape[0])
    for s in range(0, Z.shape[0], chunk):
        zc = Z[s:s + chunk]
        sq = np.einsum("ij,ij->i", zc, zc)[:, None] - 2.0 * zc @ view.means.T + view.sqnorms[None, :]
        np.maximum(sq, 0.0, out=sq)
        out[s:s + chunk] = ad._lse(-sq / (2.0 * view.sigma2), axis=1)
    out += _log_norm(view.dim, view.sigma2, view.n)
    return float(out[0]) if single else out


def log_knn_prior(z, knn_means, sigma2: float, n: int):
    """Lower bound on the full mixture obtained by keeping only ``knn_means``.

    The means must be freshly computed from the current encoder; the bound
    holds for any choice of rows, nearest or not.
    """
    knn_means = np.atleast_2d(knn_means)
    if knn_means.shape[0] > n:
        raise ContractError(f"K={knn_means.shape[0]} exceeds population size N={n}")
    return log_mixture_density(z, MixtureView(knn_means, sigma2, n))


def parzen_log_density(x, exemplars, sigma2: float):
    """Pixel-space Parzen window estimate with an isotropic Gaussian kernel."""
    return log_mixture_density(x, MixtureView(exemplars, sigma2))


def bandwidth_grid(lo: float = 0.01, hi: float = 1.0, num: int = 20) -> np.ndarray:
    return np.geomspace(lo, hi, num)


def fit_bandwidth(exemplars, validation, grid=None) -> float:
    """Grid-search sigma (not sigma^2) maximizing mean validation log density.

    Returns sigma^2.  On ties the smaller sigma wins.
    """
    exemplars = np.atleast_2d(np.asarray(exemplars, dtype=np.float64))
    validation = np.atleast_2d(np.asarray(validation, dtype=np.float64))
    if exemplars.size == 0 or validation.size == 0:
        raise ContractError("fit_bandwidth needs non-empty exemplar and validation sets")
    sigmas = bandwidth_grid() if grid is None else np.sort(np.asarray(grid, dtype=np.float64))
    view_norms = np.einsum("ij,ij->i", exemplars, exemplars)
    # squared distances do not depend on sigma; compute them once
    sq = (np.einsum("ij,ij->i", validation, validation)[:, None]
          - 2.0 * validation @ exemplars.T + view_norms[None, :])
    np.maximum(sq, 0.0, out=sq)
    d, n = exemplars.shape[1], exemplars.shape[0]
    best, best_score = None, -np.inf
    for s in sigmas:
        s2 = float(s) ** 2
        score = float(np.mean(ad._lse(-sq / (2.0 * s2), axis=1))) + _log_norm(d, s2, n)
        if score > best_score:
            best, best_score = s2, score
    return best


def log_mixture_t(z: Tensor, means: Tensor, log_sigma2: Tensor, log_n, mask_add: np.ndarray | None = None) -> Tensor:
    """Differentiable row-wise mixture log density.

    ``mask_add`` (rows x components, 0 or -inf) restricts each row of ``z`` to
    its own component subset; ``log_n`` may be a scalar or per-row array.
    """
    d = z.shape[1]
    sq = ad.sqdist(z, means)
    logits = sq * (-0.5 * ad.exp(-log_sigma2))
    if mask_add is not None:
        logits = logits + ad.const(mask_add.astype(sq.data.dtype, copy=False))
    lse = ad.logsumexp(logits, axis=1)
    return lse - 0.5 * d * (LOG_2PI + log_sigma2) - ad.const(np.asarray(log_n, dtype=sq.data.dtype))

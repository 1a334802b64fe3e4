"""Cached latent means per exemplar with exact brute-force kNN queries.

Training only uses the cache to *choose* neighbour indices; prior values are
recomputed from fresh means, so stale entries never invalidate the bound.
"""

from __future__ import annotations

import numpy as np

from . import model
from .errors import ContractError


class ExemplarCache:
    def __init__(self, means: np.ndarray):
        means = np.array(means, dtype=np.float64, copy=True)
        if means.ndim != 2 or means.shape[0] == 0:
            raise ContractError(f"cache needs a non-empty N x d_z table, got shape {means.shape}")
        if not np.isfinite(means).all():
            raise ContractError("cache entries must be finite")
        self.means = means
        self.sqnorms = np.einsum("ij,ij->i", means, means)
        self.staleness = np.zeros(len(means), dtype=np.int64)

    def __len__(self):
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def __getitem__(self, index: int) -> np.ndarray:
        return self.means[self._check(index)].copy()

    def _check(self, index):
        idx = np.asarray(index)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self)):
            raise ContractError(f"cache index out of range [0, {len(self)})")
        return index

    def tick(self):
        self.staleness += 1

    def update(self, index, mean):
        """Replace one entry, or several when ``index`` is an array of rows."""
        index = self._check(index)
        mean = np.asarray(mean, dtype=np.float64)
        if mean.shape[-1] != self.dim:
            raise ContractError(f"mean has length {mean.shape[-1]}, cache stores {self.dim}")
        if not np.isfinite(mean).all():
            raise ContractError("cache entries must be finite")
        self.means[index] = mean
        self.sqnorms[index] = np.einsum("...j,...j->...", mean, mean)
        self.staleness[index] = 0

    def distances(self, queries: np.ndarray, columns=None) -> np.ndarray:
        """Squared distances from each query row to each entry (or ``columns``)."""
        Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        E = self.means if columns is None else self.means[columns]
        n = self.sqnorms if columns is None else self.sqnorms[columns]
        d = np.einsum("ij,ij->i", Q, Q)[:, None] - 2.0 * Q @ E.T + n[None, :]
        return np.maximum(d, 0.0)

    def knn(self, query, k: int, restrict_to=None) -> np.ndarray:
        """Indices of the ``k`` nearest entries, nearest first, ties to the smaller index.

        With ``restrict_to`` the search runs *within* that index set.  If fewer
        than ``k`` candidates exist, all of them are returned.
        """
        if k < 1:
            raise ContractError(f"k must be at least 1, got {k}")
        cand = np.arange(len(self)) if restrict_to is None else np.unique(self._check(np.asarray(restrict_to)))
        d = self.distances(query, cand)[0]
        # lexsort: last key is primary
        order = np.lexsort((cand, d))
        return cand[order[:k]]

    def knn_batch(self, queries: np.ndarray, k: int, allowed: np.ndarray | None = None) -> np.ndarray:
        """Row-wise kNN for a batch of queries.

        ``allowed`` is a boolean (batch x N) mask giving each query its own
        candidate set.  Returns a (batch x k) index array; rows with fewer
        than ``k`` candidates are padded with -1.
        """
        d = self.distances(queries)
        if allowed is not None:
            d = np.where(allowed, d, np.inf)
        B, N = d.shape
        k_eff = min(k, N)
        if k_eff < N:
            part = np.argpartition(d, k_eff - 1, axis=1)[:, :k_eff]
            # argpartition may cut a tie at the k-th distance arbitrarily; widen to include all ties
            kth = np.take_along_axis(d, part, axis=1).max(axis=1)
            out = np.empty((B, k), dtype=np.int64)
            for b in range(B):
                cand = np.flatnonzero(d[b] <= kth[b])
                order = np.lexsort((cand, d[b, cand]))
                sel = cand[order[:k_eff]]
                out[b, :k_eff] = sel
                out[b, k_eff:] = -1
        else:
            order = np.lexsort((np.broadcast_to(np.arange(N), d.shape), d), axis=1)
            out = np.full((B, k), -1, dtype=np.int64)
            out[:, :N] = order
        if allowed is not None:
            rows = np.arange(B)[:, None]
            valid = out >= 0
            ok = np.zeros_like(valid)
            ok[valid] = allowed[np.broadcast_to(rows, out.shape)[valid], out[valid]]
            out[~ok] = -1
        return out

    def dump(self) -> dict[str, np.ndarray]:
        return {"cache.means": self.means.copy(), "cache.staleness": self.staleness.copy()}

    @classmethod
    def restore(cls, blocks) -> "ExemplarCache":
        c = cls(blocks["cache.means"])
        if "cache.staleness" in blocks:
            c.staleness = np.asarray(blocks["cache.staleness"], dtype=np.int64).copy()
        return c


def cache_init(images: np.ndarray, params) -> ExemplarCache:
    """One prior-encoder pass over all exemplars."""
    if len(images) == 0:
        raise ContractError("cannot build a cache from an empty dataset")
    return ExemplarCache(model.prior_encode_batched(params, np.asarray(images)))


def cache_update(cache: ExemplarCache, index, mean) -> None:
    cache.update(index, mean)


def knn_query(cache: ExemplarCache, query_mean, k: int, restrict_to=None) -> list[int]:
    return cache.knn(query_mean, k, restrict_to).tolist()

"""Gated MLP encoder pair (shared mean head) and Bernoulli decoder.

Parameters live in a flat ``dict[str, ndarray]``.  The ``*_t`` functions take
a dict of :class:`~exvae.numerics.Tensor` leaves and build a differentiable
graph; the plain functions evaluate the same graph on arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .numerics import autodiff as ad
from .numerics.autodiff import Tensor

LOGVAR_MIN, LOGVAR_MAX = -20.0, 20.0
PROB_EPS = 1e-7
HIDDEN = 300
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    mean: np.ndarray
    log_var: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def log_prob(self, z: np.ndarray) -> np.ndarray:
        return -0.5 * np.sum(LOG_2PI + self.log_var + (z - self.mean) ** 2 * np.exp(-self.log_var), axis=-1)


def _gated_layer_shapes(prefix: str, n_in: int, n_out: int) -> dict[str, tuple]:
    return {
        f"{prefix}.W": (n_in, n_out), f"{prefix}.b": (n_out,),
        f"{prefix}.Wg": (n_in, n_out), f"{prefix}.bg": (n_out,),
    }


def param_shapes(d_x: int = 784, d_z: int = 40, hidden: int = HIDDEN) -> dict[str, tuple]:
    shapes = {}
    shapes.update(_gated_layer_shapes("enc.h1", d_x, hidden))
    shapes.update(_gated_layer_shapes("enc.h2", hidden, hidden))
    shapes.update({"enc.mean.W": (hidden, d_z), "enc.mean.b": (d_z,),
                   "enc.logvar.W": (hidden, d_z), "enc.logvar.b": (d_z,)})
    shapes.update(_gated_layer_shapes("dec.h1", d_z, hidden))
    shapes.update(_gated_layer_shapes("dec.h2", hidden, hidden))
    shapes.update({"dec.out.W": (hidden, d_x), "dec.out.b": (d_x,), "prior.log_sigma2": ()})
    return shapes


def init_params(d_x: int = 784, d_z: int = 40, rng: np.random.Generator | None = None,
                hidden: int = HIDDEN, dtype=np.float32) -> dict[str, np.ndarray]:
    """Weights uniform in +-1/sqrt(fan_in), biases zero, log sigma^2 = 0."""
    rng = np.random.default_rng(0) if rng is None else rng
    params = {}
    for name, shape in param_shapes(d_x, d_z, hidden).items():
        if len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def dims(params) -> tuple[int, int]:
    """(d_x, d_z) of a parameter tree."""
    W = params["enc.h1.W"]
    Wm = params["enc.mean.W"]
    return W.shape[0], Wm.shape[1]


def leaves(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: ad.leaf(v, k) for k, v in params.items()}


def consts(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: ad.const(v) for k, v in params.items()}


def _gated(P, prefix: str, h):
    return (h @ P[f"{prefix}.W"] + P[f"{prefix}.b"]) * ad.sigmoid(h @ P[f"{prefix}.Wg"] + P[f"{prefix}.bg"])


def _check_width(P, x, key: str, what: str):
    want = P[key].shape[0]
    got = x.shape[-1]
    if got != want:
        raise ContractError(f"{what}: expected length {want}, got {got}")


def trunk_t(P, x) -> Tensor:
    x = x if isinstance(x, Tensor) else ad.const(np.atleast_2d(x).astype(P["enc.h1.W"].data.dtype, copy=False))
    _check_width(P, x, "enc.h1.W", "encoder input")
    return _gated(P, "enc.h2", _gated(P, "enc.h1", x))


def mean_head_t(P, h) -> Tensor:
    return h @ P["enc.mean.W"] + P["enc.mean.b"]


def logvar_head_t(P, h) -> Tensor:
    return ad.clip(h @ P["enc.logvar.W"] + P["enc.logvar.b"], LOGVAR_MIN, LOGVAR_MAX)


def encode_t(P, x) -> tuple[Tensor, Tensor]:
    h = trunk_t(P, x)
    return mean_head_t(P, h), logvar_head_t(P, h)


def prior_mean_t(P, x) -> Tensor:
    return mean_head_t(P, trunk_t(P, x))


def decode_t(P, z) -> Tensor:
    z = z if isinstance(z, Tensor) else ad.const(np.atleast_2d(z).astype(P["dec.h1.W"].data.dtype, copy=False))
    _check_width(P, z, "dec.h1.W", "decoder input")
    h = _gated(P, "dec.h2", _gated(P, "dec.h1", z))
    return ad.clip(ad.sigmoid(h @ P["dec.out.W"] + P["dec.out.b"]), PROB_EPS, 1.0 - PROB_EPS)


def bernoulli_log_prob_t(x, probs: Tensor) -> Tensor:
    x = ad.const(np.asarray(x, dtype=probs.data.dtype))
    return (x * ad.log(probs) + (1.0 - x) * ad.log(1.0 - probs)).sum(axis=-1)


def gaussian_log_prob_t(z: Tensor, mean: Tensor, log_var: Tensor) -> Tensor:
    return -0.5 * (LOG_2PI + log_var + ad.square(z - mean) * ad.exp(-log_var)).sum(axis=-1)


def _squeeze_like(out: np.ndarray, x) -> np.ndarray:
    return out[0] if np.ndim(x) == 1 else out


def encode(params, x) -> DiagGaussian:
    """Posterior q(z|x): gated-MLP mean and clamped log-variance.  Accepts one
    vector or a batch of rows."""
    mean, logvar = encode_t(consts(params), x)
    return DiagGaussian(_squeeze_like(mean.data, x), _squeeze_like(logvar.data, x))


def prior_encode(params, x) -> np.ndarray:
    """Mean of the exemplar prior component; identical to ``encode(x).mean``."""
    return _squeeze_like(prior_mean_t(consts(params), x).data, x)


def prior_encode_batched(params, x: np.ndarray, chunk: int = 2000) -> np.ndarray:
    P = consts(params)
    return np.concatenate([prior_mean_t(P, x[i:i + chunk]).data for i in range(0, len(x), chunk)])


def reparam_sample(g: DiagGaussian, eps: np.ndarray) -> np.ndarray:
    eps = np.asarray(eps)
    if eps.shape[-1] != g.dim:
        raise ContractError(f"noise has length {eps.shape[-1]}, expected {g.dim}")
    return g.mean + np.exp(0.5 * g.log_var) * eps


def reparam_sample_t(mean: Tensor, log_var: Tensor, eps: np.ndarray) -> Tensor:
    return mean + ad.exp(0.5 * log_var) * ad.const(eps.astype(mean.data.dtype, copy=False))


def decode(params, z) -> np.ndarray:
    """Bernoulli success probabilities, clamped to [1e-7, 1 - 1e-7]."""
    return _squeeze_like(decode_t(consts(params), z).data, z)


def bernoulli_log_prob(x, probs) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if x.shape != probs.shape:
        raise ContractError(f"x shape {x.shape} != probability shape {probs.shape}")
    out = np.sum(x * np.log(probs) + (1.0 - x) * np.log1p(-probs), axis=-1)
    if np.isnan(out).any():
        raise NumericError("NaN in Bernoulli log-likelihood")
    return out if np.ndim(out) else float(out)


def sigma2(params) -> float:
    return float(np.exp(params["prior.log_sigma2"]))

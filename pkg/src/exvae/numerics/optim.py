"""Adam with per-block gradient normalization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, NumericError

ParamTree = dict[str, np.ndarray]


@dataclass
class OptimizerState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: ParamTree = field(default_factory=dict)
    v: ParamTree = field(default_factory=dict)
    # per-block update counts; blocks skipped on zero gradient lag behind ``step``
    counts: dict[str, int] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamTree, lr: float = 5e-4, **kw) -> "OptimizerState":
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            counts={k: 0 for k in params},
            **kw,
        )


def gn_adam_step(params: ParamTree, grads: ParamTree, state: OptimizerState) -> tuple[ParamTree, OptimizerState]:
    """One descent step of gradient-normalized Adam.

    Each block's gradient is rescaled to unit L2 norm before entering the
    moment estimates, so the update is invariant to the gradient's scale.
    Blocks whose gradient is exactly zero are left untouched.  Params and
    state are updated in place and also returned.
    """
    if state.lr <= 0:
        raise ContractError(f"learning rate must be positive, got {state.lr}")
    for k, g in grads.items():
        if k not in params:
            raise ContractError(f"gradient for unknown block {k!r}")
        if g.shape != params[k].shape:
            raise ContractError(f"block {k!r}: gradient shape {g.shape} != {params[k].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in block {k!r}", block=k)

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for k, g in grads.items():
        norm = float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))
        if norm == 0.0:
            continue
        g = g / norm
        t = state.counts.get(k, 0) + 1
        state.counts[k] = t
        m = state.m.setdefault(k, np.zeros_like(params[k]))
        v = state.v.setdefault(k, np.zeros_like(params[k]))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        params[k] -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params[k].dtype)
    return params, state

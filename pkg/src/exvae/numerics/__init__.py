from .autodiff import Tensor, backward, const, leaf, log_sum_exp
from .optim import OptimizerState, ParamTree, gn_adam_step

__all__ = [
    "Tensor",
    "backward",
    "const",
    "leaf",
    "log_sum_exp",
    "OptimizerState",
    "ParamTree",
    "gn_adam_step",
]

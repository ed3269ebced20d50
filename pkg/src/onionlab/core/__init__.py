from .autodiff import NumericError, Tensor, forward_backward
from .layers import gumbel_softmax_hard, one_hot, orthogonalize
from .optim import AdamW
from .rng import ALGORITHM as RNG_ALGORITHM, derive_seed, make_rng

__all__ = [
    "AdamW",
    "NumericError",
    "RNG_ALGORITHM",
    "Tensor",
    "derive_seed",
    "forward_backward",
    "gumbel_softmax_hard",
    "make_rng",
    "one_hot",
    "orthogonalize",
]

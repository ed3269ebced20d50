"""Trainable interventions on frozen GRU boundary states."""
from .das import DasParams, eval_das, subspace_replace, train_das
from .onion import OnionParams, eval_onion, onion_intervene, onion_scale, train_onion

__all__ = [
    "DasParams",
    "OnionParams",
    "eval_das",
    "eval_onion",
    "onion_intervene",
    "onion_scale",
    "subspace_replace",
    "train_das",
    "train_onion",
]

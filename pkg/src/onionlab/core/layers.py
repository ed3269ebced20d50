"""Composite differentiable pieces built from the autodiff primitives."""
from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor

log = logging.getLogger(__name__)


def gumbel_softmax_hard(logits: Tensor, temperature: float, rng: np.random.Generator) -> Tensor:
    """Hard Gumbel-softmax over the last axis with a straight-through gradient.

    The forward value is an exact one-hot at ``argmax(logits + gumbel)``; the
    backward pass uses the gradient of ``softmax((logits + gumbel) / temperature)``
    evaluated at the same noise draw. Noise is drawn fresh on every call.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.isfinite(logits.data).all():
        raise NumericError("non-finite logits passed to gumbel_softmax_hard")
    u = rng.random(logits.shape)
    # clip keeps -log(-log(u)) finite at the edges of [0, 1)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    noise = (-np.log(-np.log(u))).astype(logits.dtype)
    perturbed = logits + noise
    soft = ad.softmax(perturbed * (1.0 / temperature), axis=-1)
    hard = one_hot(perturbed.data.argmax(axis=-1), logits.shape[-1], logits.dtype)
    return ad.straight_through(hard, soft)


def one_hot(idx, n: int, dtype=np.float32) -> np.ndarray:
    idx = np.asarray(idx)
    out = np.zeros(idx.shape + (n,), dtype=dtype)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def orthogonalize(params: Tensor, max_retries: int = 5) -> Tensor:
    """Cayley map ``R = (I - S)(I + S)^-1`` with ``S = (P - P^T) / 2``.

    ``I + S`` is invertible for every real skew ``S``; a LinAlgError can only
    come from overflow in huge parameters, in which case the parameters are
    halved and the solve retried.
    """
    n, m = params.shape
    if n != m:
        raise ValueError(f"orthogonalize needs a square matrix, got {params.shape}")
    eye = np.eye(n, dtype=params.dtype)
    scale = 1.0
    for _ in range(max_retries + 1):
        p = params if scale == 1.0 else params * scale
        skew = (p - p.T) * 0.5
        try:
            return (eye - skew) @ ad.inv(eye + skew)
        except (np.linalg.LinAlgError, NumericError) as err:
            log.warning("Cayley solve failed (%s); retrying with parameters scaled by %g", err, scale / 2)
            scale /= 2
    raise NumericError("Cayley transform failed after retries")


def mlp_layer_norm(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """``relu(LN(x w1 + b1)) w2 + b2``: the denoising classifier shape."""
    return ad.relu(ad.layer_norm(x @ w1 + b1)) @ w2 + b2

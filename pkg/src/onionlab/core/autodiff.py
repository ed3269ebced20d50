"""Reverse-mode automatic differentiation over numpy arrays.

Every primitive builds a node holding its output value, references to its
inputs and a closure mapping the output cotangent to input cotangents.
Nodes are only linked when at least one input requires a gradient, so
frozen forward passes cost the same as plain numpy.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

# Toggle for the per-op finiteness check (cheap, on by default).
CHECK_FINITE = True


class NumericError(FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


def _check(arr: np.ndarray, op: str, where: str = "forward") -> None:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in {where} of '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")
    __array_ufunc__ = None  # make `ndarray op Tensor` defer to the reflected Tensor operator

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, dtype={self.dtype})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- differentiation --------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                # forward values are checked per op; cotangents only where they land
                _check(g, node.name or "leaf", "gradient")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative post-order DFS; recursion would overflow on long unrolls
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)),
                 "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant scalar exponent."""
    p = float(exponent)
    out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def scalar_power(base: Tensor, exponent) -> Tensor:
    """Elementwise ``base ** exponent`` where ``exponent`` is a constant array of integers.

    Unlike :func:`power`, the exponent may differ per element (broadcast
    against ``base``). Integer exponents keep negative bases well defined.
    """
    e = np.asarray(exponent)
    out = base.data ** e
    out = out.astype(base.dtype, copy=False)

    def backward(g):
        d = np.where(e == 0, 0.0, e * base.data ** np.where(e == 0, 0, e - 1))
        return (_unbroadcast(g * d, base.shape).astype(base.dtype, copy=False),)

    return _node(out, (base,), backward, "scalar_power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- linear algebra and shape --------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None),
                 "matmul")


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), backward, "getitem")


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` indexed by integer array ``ids``."""
    ids = np.asarray(ids)

    def backward(g):
        flat = ids.reshape(-1)
        g = g.reshape(-1, table.shape[1])
        if table.shape[0] <= 4096:
            # scatter-add as a one-hot matmul; far faster than np.add.at
            hot = (flat[None, :] == np.arange(table.shape[0])[:, None]).astype(g.dtype)
            return (hot @ g,)
        full = np.zeros_like(table.data)
        np.add.at(full, flat, g)
        return (full,)

    return _node(table.data[ids], (table,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def inv(a: Tensor) -> Tensor:
    """Matrix inverse; solved in float64 and cast back for accuracy."""
    out = np.linalg.inv(a.data.astype(np.float64)).astype(a.dtype)
    return _node(out, (a,), lambda g: (-(out.T @ g @ out.T),), "inv")


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient routed unchanged to ``soft``."""
    hard = np.asarray(hard, dtype=soft.dtype)
    return _node(hard, (soft,), lambda g: (g,), "straight_through")


# -- normalisation and losses --------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward, "log_softmax")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over rows where ``mask`` is set.

    ``logits`` is (rows, classes). Rows with mask 0 contribute neither loss
    nor gradient.
    """
    targets = np.asarray(targets).reshape(-1)
    rows = logits.shape[0]
    weight = np.ones(rows, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype).reshape(-1)
    count = max(float(weight.sum()), 1.0)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = logp[np.arange(rows), targets]
    loss = np.asarray(-(picked * weight).sum() / count, dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(rows), targets] -= 1.0
        grad *= (weight / count)[:, None]
        return (grad * g,)

    return _node(loss, (logits,), backward, "cross_entropy")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine terms)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out = centered * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - out * gy),)

    return _node(out, (a,), backward, "layer_norm")


# -- driver --------------------------------------------------------------------

def forward_backward(loss_fn: Callable[..., Tensor], params: dict[str, np.ndarray],
                     *args, **kwargs) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn(tensors, *args)`` and differentiate it.

    ``params`` maps names to arrays; each becomes a trainable leaf. Returns the
    scalar loss and a gradient for every parameter (zeros when the loss does
    not depend on it).
    """
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    loss = loss_fn(leaves, *args, **kwargs)
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if loss.requires_grad:
        loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads


def no_grad_params(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, name=k) for k, v in params.items()}


def leaves(params: dict[str, np.ndarray], trainable: Iterable[str] | None = None) -> dict[str, Tensor]:
    keep = set(params) if trainable is None else set(trainable)
    return {k: Tensor(v, requires_grad=k in keep, name=k) for k, v in params.items()}

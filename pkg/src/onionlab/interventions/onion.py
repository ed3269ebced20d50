"""Scaled-embedding (onion) interventions.

To swap the token at position ``j`` the boundary state receives
``s(j) * (E'[new] - E'[old])`` with a per-channel scale law
``s(j) = g * gamma**j + beta * j + b``. ``E'`` is learned from scratch and is
unrelated to the GRU's own input embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import autodiff as ad
from ..core.autodiff import Tensor
from ..core.optim import AdamW
from ..core.rng import make_rng
from ..gru import DecodeMode, Feedback, GruParams, Net, boundary_states, decode_batch, decode_loss, greedy_from_states, sequence_matches
from ..taskgen import Corpus, OnionEditExample, TaskConfig, make_onion_edit
from ..trainer import RunRecord, TrainConfig, optimize

CONSTRAINTS = ("free", "fixed_gamma_beta_one")


@dataclass
class OnionParams:
    E: np.ndarray  # (N_S, N)
    g: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    b: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"E": self.E, "g": self.g, "gamma": self.gamma, "beta": self.beta, "b": self.b}

    @classmethod
    def init(cls, n_symbols: int, hidden_size: int, rng: np.random.Generator,
             constraint: str = "free", dtype=np.float32) -> OnionParams:
        n = hidden_size
        gamma, beta = (0.5, 0.0) if constraint == "free" else (1.0, 1.0)
        return cls(rng.normal(0.0, 1.0 / np.sqrt(n), (n_symbols, n)).astype(dtype),
                   np.ones(n, dtype), np.full(n, gamma, dtype), np.full(n, beta, dtype), np.zeros(n, dtype))


def scale_tensor(P: dict[str, Tensor], positions) -> Tensor:
    """(batch, N) scales for 1-based ``positions``."""
    j = np.asarray(positions, dtype=np.int64).reshape(-1, 1)
    jf = j.astype(P["g"].dtype)
    return P["g"] * ad.scalar_power(P["gamma"], j) + P["beta"] * jf + P["b"]


def onion_scale(op: OnionParams, j: int) -> np.ndarray:
    if j < 1:
        raise ValueError("positions are 1-based")
    P = {k: Tensor(v) for k, v in op.arrays().items()}
    return scale_tensor(P, [j]).data[0]


def apply_edits(P: dict[str, Tensor], h: Tensor, positions, old, new) -> Tensor:
    diff = ad.take_rows(P["E"], np.asarray(new)) - ad.take_rows(P["E"], np.asarray(old))
    return h + scale_tensor(P, positions) * diff


def onion_intervene(op: OnionParams, h: np.ndarray, edit: OnionEditExample) -> np.ndarray:
    """``h + s(j) * (E'[new] - E'[old])`` for one state."""
    if edit.new_token == edit.old_token:
        return np.array(h, copy=True)
    P = {k: Tensor(v) for k, v in op.arrays().items()}
    out = apply_edits(P, Tensor(np.asarray(h, op.E.dtype)[None]), [edit.j], [edit.old_token], [edit.new_token])
    return out.data[0]


def _pack(edits: list[OnionEditExample], l_max: int) -> dict[str, np.ndarray]:
    n = len(edits)
    base = np.zeros((n, l_max), dtype=np.int64)
    target = np.zeros((n, l_max), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for i, e in enumerate(edits):
        L = len(e.base)
        base[i, :L] = e.base
        target[i, :L] = e.target
        lengths[i] = L
    return {"base": base, "target": target, "lengths": lengths,
            "j": np.array([e.j for e in edits]), "old": np.array([e.old_token for e in edits]),
            "new": np.array([e.new_token for e in edits])}


def make_edits(rng: np.random.Generator, pool: Corpus, n: int, n_symbols: int,
               indices: np.ndarray | None = None) -> list[OnionEditExample]:
    idx = rng.integers(0, len(pool), n) if indices is None else indices
    return [make_onion_edit(rng, pool.example(int(i)), n_symbols) for i in idx]


def onion_loss(P: dict[str, Tensor], net: Net, h: np.ndarray, packed: dict, mode: DecodeMode) -> Tensor:
    h2 = apply_edits(P, Tensor(h), packed["j"], packed["old"], packed["new"])
    logits, _ = decode_batch(net, h2, packed["lengths"], mode, Feedback.TEACHER_FORCED, targets=packed["target"])
    return decode_loss(logits, packed["target"], packed["lengths"])


def eval_onion(model: GruParams, op: OnionParams, edits: list[OnionEditExample], mode: DecodeMode,
               l_max: int | None = None) -> float:
    """Fraction of edits whose native greedy decode equals the edited sequence."""
    l_max = l_max or max(len(e.base) for e in edits)
    packed = _pack(edits, l_max)
    h = boundary_states(model, packed["base"], packed["lengths"])
    P = {k: Tensor(v) for k, v in op.arrays().items()}
    h2 = apply_edits(P, Tensor(h), packed["j"], packed["old"], packed["new"]).data
    preds = greedy_from_states(model, h2, packed["lengths"], mode)
    return float(sequence_matches(preds, packed["target"], packed["lengths"]).mean())


def train_onion(model: GruParams, cfg: TrainConfig, task: TaskConfig, train: Corpus, mode: DecodeMode,
                constraint: str = "free", eval_edits: list[OnionEditExample] | None = None,
                ) -> tuple[OnionParams, list[RunRecord]]:
    """Learn E', g, gamma, beta, b (gamma and beta pinned to 1 under the control constraint)."""
    if constraint not in CONSTRAINTS:
        raise ValueError(f"unknown constraint {constraint!r}")
    mode = DecodeMode(mode)
    op = OnionParams.init(task.n_symbols, model.hidden_size, make_rng(cfg.seed, "onion-init", constraint), constraint)
    arrays = op.arrays()
    trainable = {"E", "g", "b"} if constraint != "free" else set(arrays)
    net = Net.frozen(model)
    data_rng = make_rng(cfg.seed, "onion-data", constraint)

    def next_batch(step):
        packed = _pack(make_edits(data_rng, train, cfg.batch_size, task.n_symbols), task.l_max)
        h = boundary_states(model, packed["base"], packed["lengths"])
        return net, h, packed, mode

    eval_fn = None
    if eval_edits:
        eval_fn = lambda: eval_onion(model, op, eval_edits, mode, task.l_max)  # noqa: E731
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    records = optimize(onion_loss, arrays, next_batch, cfg.max_steps, opt, eval_fn, cfg.eval_every,
                       trainable=trainable)
    return op, records

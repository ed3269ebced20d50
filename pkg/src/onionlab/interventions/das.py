"""Subspace interchange interventions with a learned rotation and assignment.

The boundary state is rotated by an orthogonal ``R`` (Cayley map of a free
square parameter). Each rotated coordinate is assigned to one causal
variable, or to column 0 meaning "unassigned", through a row-wise hard
Gumbel-softmax over learned logits. Intervening on a set of variables copies
their coordinates from the source state and rotates back with ``R^T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import autodiff as ad
from ..core.autodiff import Tensor
from ..core.layers import gumbel_softmax_hard, one_hot, orthogonalize
from ..core.optim import AdamW
from ..core.rng import make_rng
from ..gru import DecodeMode, Feedback, GruParams, Net, boundary_states, decode_batch, decode_loss, greedy_from_states, sequence_matches
from ..taskgen import (
    CounterfactualExample,
    Corpus,
    TaskConfig,
    make_bigram_counterfactual,
    make_unigram_counterfactual,
)
from ..trainer import RunRecord, TrainConfig, optimize

GRANULARITIES = ("unigram", "bigram")


@dataclass
class DasParams:
    skew: np.ndarray  # (N, N) free parameter of the rotation
    assign_logits: np.ndarray  # (N, V + 1); column 0 = unassigned
    granularity: str = "unigram"

    @property
    def n_variables(self) -> int:
        return self.assign_logits.shape[1] - 1

    def arrays(self) -> dict[str, np.ndarray]:
        return {"skew": self.skew, "assign_logits": self.assign_logits}

    def rotation(self) -> np.ndarray:
        return orthogonalize(Tensor(self.skew)).data

    def hard_assignment(self) -> np.ndarray:
        """Deterministic evaluation assignment: per-row argmax of the logits."""
        return one_hot(self.assign_logits.argmax(axis=1), self.assign_logits.shape[1], self.assign_logits.dtype)

    @classmethod
    def init(cls, hidden_size: int, l_max: int, granularity: str, rng: np.random.Generator,
             dtype=np.float32) -> DasParams:
        if granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {granularity!r}")
        n_vars = l_max if granularity == "unigram" else l_max - 1
        return cls(np.zeros((hidden_size, hidden_size), dtype=dtype),
                   rng.normal(0.0, 0.1, (hidden_size, n_vars + 1)).astype(dtype), granularity)


def variable_selector(variable_sets: list[tuple[int, ...]], n_variables: int, dtype=np.float32) -> np.ndarray:
    """(batch, V + 1) indicator of the variables to patch; column 0 never set."""
    sel = np.zeros((len(variable_sets), n_variables + 1), dtype=dtype)
    for row, vs in enumerate(variable_sets):
        for v in vs:
            if not 1 <= v <= n_variables:
                raise ValueError(f"variable index {v} outside [1, {n_variables}]")
            sel[row, v] = 1.0
    return sel


def interchange(R: Tensor, assignment: Tensor, h_base: Tensor, h_source: Tensor, selector: np.ndarray) -> Tensor:
    """Batched interchange: rows of ``selector`` pick the variables patched per example."""
    base_rot = h_base @ R.T
    source_rot = h_source @ R.T
    mask = Tensor(selector) @ assignment.T  # (batch, N), entries in {0, 1}
    # equals (base_rot + mask * (source_rot - base_rot)) @ R because R^T R = I, written
    # as a residual so that an empty mask returns h_base bit-for-bit
    return h_base + (mask * (source_rot - base_rot)) @ R


def subspace_replace(das: DasParams, h_base: np.ndarray, h_source: np.ndarray,
                     variables: tuple[int, ...] | set[int]) -> np.ndarray:
    """Single-state interchange in evaluation mode (argmax assignment)."""
    sel = variable_selector([tuple(variables)], das.n_variables, das.skew.dtype)
    out = interchange(Tensor(das.rotation()), Tensor(das.hard_assignment()),
                      Tensor(np.asarray(h_base, das.skew.dtype)[None]),
                      Tensor(np.asarray(h_source, das.skew.dtype)[None]), sel)
    return out.data[0]


def _pack(examples: list[CounterfactualExample], l_max: int) -> dict[str, np.ndarray]:
    n = len(examples)
    arr = {k: np.zeros((n, l_max), dtype=np.int64) for k in ("y", "b", "s")}
    lengths = np.zeros(n, dtype=np.int64)
    for i, ex in enumerate(examples):
        L = ex.length
        arr["y"][i, :L] = ex.y
        arr["b"][i, :L] = ex.b
        arr["s"][i, :L] = ex.s
        lengths[i] = L
    arr["lengths"] = lengths
    return arr


def make_counterfactuals(granularity: str, rng: np.random.Generator, task: TaskConfig, pool: Corpus | None,
                         n: int) -> list[CounterfactualExample]:
    make = make_unigram_counterfactual if granularity == "unigram" else make_bigram_counterfactual
    return [make(rng, task, pool) for _ in range(n)]


def das_loss(P: dict[str, Tensor], net: Net, hb: np.ndarray, hs: np.ndarray, sel: np.ndarray,
             y: np.ndarray, lengths: np.ndarray, mode: DecodeMode, rng: np.random.Generator,
             temperature: float) -> Tensor:
    R = orthogonalize(P["skew"])
    assignment = gumbel_softmax_hard(P["assign_logits"], temperature, rng)
    h = interchange(R, assignment, Tensor(hb), Tensor(hs), sel)
    logits, _ = decode_batch(net, h, lengths, mode, Feedback.TEACHER_FORCED, targets=y)
    return decode_loss(logits, y, lengths)


def intervened_states(model: GruParams, das: DasParams, examples: list[CounterfactualExample],
                      l_max: int) -> tuple[np.ndarray, dict]:
    packed = _pack(examples, l_max)
    hb = boundary_states(model, packed["b"], packed["lengths"])
    hs = boundary_states(model, packed["s"], packed["lengths"])
    sel = variable_selector([ex.variables() for ex in examples], das.n_variables, das.skew.dtype)
    R, A = Tensor(das.rotation()), Tensor(das.hard_assignment())
    out = np.concatenate([interchange(R, A, Tensor(hb[i:i + 2048]), Tensor(hs[i:i + 2048]), sel[i:i + 2048]).data
                          for i in range(0, len(examples), 2048)], axis=0)
    return out, packed


def eval_das(model: GruParams, das: DasParams, examples: list[CounterfactualExample], mode: DecodeMode,
             l_max: int | None = None) -> float:
    """Fraction of counterfactuals whose greedy decode of the patched state equals ``y``."""
    if not examples:
        raise ValueError("eval_das needs a non-empty dataset")
    l_max = l_max or max(ex.length for ex in examples)
    h, packed = intervened_states(model, das, examples, l_max)
    preds = greedy_from_states(model, h, packed["lengths"], mode)
    return float(sequence_matches(preds, packed["y"], packed["lengths"]).mean())


def train_das(model: GruParams, granularity: str, cfg: TrainConfig, task: TaskConfig, train: Corpus,
              mode: DecodeMode, eval_examples: list[CounterfactualExample] | None = None,
              temperature: float = 1.0, init: DasParams | None = None) -> tuple[DasParams, list[RunRecord]]:
    """Fit rotation and assignment against the frozen model.

    Counterfactual batches are drawn online from ``train`` (fresh Gumbel
    noise every step); the decoder is teacher-forced toward ``y`` in the
    model's own decode mode.
    """
    mode = DecodeMode(mode)
    das = init or DasParams.init(model.hidden_size, task.l_max, granularity, make_rng(cfg.seed, "das-init", granularity))
    arrays = das.arrays()
    net = Net.frozen(model)
    data_rng = make_rng(cfg.seed, "das-data", granularity)
    noise_rng = make_rng(cfg.seed, "das-gumbel", granularity)

    def next_batch(step):
        examples = make_counterfactuals(granularity, data_rng, task, train, cfg.batch_size)
        packed = _pack(examples, task.l_max)
        hb = boundary_states(model, packed["b"], packed["lengths"])
        hs = boundary_states(model, packed["s"], packed["lengths"])
        sel = variable_selector([ex.variables() for ex in examples], das.n_variables, das.skew.dtype)
        return net, hb, hs, sel, packed["y"], packed["lengths"], mode, noise_rng, temperature

    eval_fn = None
    if eval_examples:
        eval_fn = lambda: eval_das(model, das, eval_examples, mode, task.l_max)  # noqa: E731
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    records = optimize(das_loss, arrays, next_batch, cfg.max_steps, opt, eval_fn, cfg.eval_every)
    return das, records

"""Hand-designed onion memory: a running sum of token embeddings at geometric scales.

The scalar scale starts at 1 and shrinks by ``gamma`` each input step, so
position ``t`` is stored at magnitude ``gamma**(t-1)``. At the first decode
step it flips to -1 and keeps shrinking; feeding each greedy output back
subtracts exactly the layer that was just read. Only the embedding and the
output projection are learned; ``gamma`` is fixed at 0.4 (< 0.5 keeps every
layer larger than everything stored after it).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import autodiff as ad
from .core.autodiff import Tensor
from .core.optim import AdamW
from .core.rng import make_rng
from .gru import sequence_matches
from .taskgen import Corpus, RepeatExample, TaskConfig, build_corpus
from .trainer import RunRecord, TrainConfig, batches, optimize

GAMMA = 0.4


@dataclass
class ToyParams:
    E: np.ndarray  # (N_S, N)
    W_o: np.ndarray  # (N, N_S)
    b_o: np.ndarray  # (N_S,)
    gamma: float = GAMMA

    def arrays(self) -> dict[str, np.ndarray]:
        # gamma is deliberately absent: it is not a trainable parameter
        return {"E": self.E, "W_o": self.W_o, "b_o": self.b_o}

    @classmethod
    def init(cls, n_symbols: int, hidden_size: int, rng: np.random.Generator, dtype=np.float32) -> ToyParams:
        bound = 1.0 / np.sqrt(hidden_size)
        return cls(rng.normal(0.0, bound, (n_symbols, hidden_size)).astype(dtype),
                   rng.uniform(-bound, bound, (hidden_size, n_symbols)).astype(dtype),
                   np.zeros(n_symbols, dtype))


def scale_trace(length: int, gamma: float = GAMMA) -> list[float]:
    """Scalar scales s_1 .. s_2L."""
    s = []
    for t in range(1, 2 * length + 1):
        if t == 1:
            s.append(1.0)
        elif t == length + 1:
            s.append(-1.0)
        else:
            s.append(gamma * s[-1])
    return s


def _run(P: dict[str, Tensor], tokens: np.ndarray, lengths: np.ndarray, gamma: float,
         teacher: bool) -> tuple[list[Tensor], np.ndarray]:
    lengths = np.asarray(lengths, dtype=np.int64)
    batch, steps = len(lengths), int(lengths.max())
    dtype = P["E"].dtype
    pos = np.arange(steps)[None, :]
    weights = np.where(pos < lengths[:, None], gamma ** pos, 0.0).astype(dtype)  # (B, steps)
    h = None
    for t in range(steps):
        term = ad.take_rows(P["E"], tokens[:, t]) * weights[:, t:t + 1]
        h = term if h is None else h + term
    logits, preds = [], np.zeros((batch, steps), dtype=np.int64)
    for k in range(steps):
        logit = h @ P["W_o"] + P["b_o"]
        logits.append(logit)
        preds[:, k] = logit.data.argmax(axis=1)
        if k == steps - 1:
            break
        fed = tokens[:, k] if teacher else preds[:, k]
        h = h - ad.take_rows(P["E"], fed) * np.asarray(gamma ** k, dtype=dtype)
    return logits, preds


def toy_loss(P: dict[str, Tensor], tokens: np.ndarray, lengths: np.ndarray, gamma: float) -> Tensor:
    from .gru import decode_loss

    logits, _ = _run(P, tokens, lengths, gamma, teacher=True)
    return decode_loss(logits, tokens, lengths)


def toy_predict(p: ToyParams, tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    P = {k: Tensor(v) for k, v in p.arrays().items()}
    return _run(P, np.asarray(tokens, dtype=np.int64), lengths, p.gamma, teacher=False)[1]


def toy_run(p: ToyParams, example: RepeatExample | tuple[int, ...]) -> list[int]:
    tokens = example.tokens if isinstance(example, RepeatExample) else tuple(example)
    return [int(t) for t in toy_predict(p, np.array([tokens]), np.array([len(tokens)]))[0]]


def toy_memory(p: ToyParams, tokens) -> np.ndarray:
    """Memory right after encoding: sum of gamma**(t-1) * E[i_t]."""
    return sum(p.gamma ** t * p.E[tok] for t, tok in enumerate(tokens))


def toy_memories(p: ToyParams, tokens) -> tuple[np.ndarray, list[int]]:
    """Memories h_1 .. h_{2L+1} and the greedy outputs, following the recurrence step by step.

    Unlike :func:`toy_run` the last emitted token is also fed back, so a
    correct decode ends with every stored layer removed.
    """
    tokens = list(tokens)
    L = len(tokens)
    scales = scale_trace(L, p.gamma)
    h = np.zeros(p.E.shape[1], dtype=np.float64)
    hist, outputs = [h.copy()], []
    for t in range(1, 2 * L + 1):
        if t <= L:
            x = p.E[tokens[t - 1]]
        else:
            y = int(np.argmax(h @ p.W_o + p.b_o))
            outputs.append(y)
            x = p.E[y]
        h = h + scales[t - 1] * x
        hist.append(h.copy())
    return np.stack(hist), outputs


def toy_accuracy(p: ToyParams, corpus: Corpus) -> float:
    preds = toy_predict(p, corpus.tokens, corpus.lengths)
    return float(sequence_matches(preds, corpus.tokens, corpus.lengths).mean())


def toy_train(cfg: TrainConfig, task: TaskConfig, hidden_size: int = 64,
              corpora: tuple[Corpus, Corpus] | None = None) -> tuple[ToyParams, list[RunRecord]]:
    """Teacher-forced training of E, W_o, b_o; validation on the held-out corpus."""
    train, test = corpora if corpora is not None else build_corpus(task)
    p = ToyParams.init(task.n_symbols, hidden_size, make_rng(cfg.seed, "toy-init"))
    order = batches(len(train), cfg.batch_size, make_rng(cfg.seed, "toy-batches"))
    tokens = train.tokens.astype(np.int64)
    lengths = train.lengths.astype(np.int64)

    def next_batch(step):
        idx = next(order)
        return tokens[idx], lengths[idx], p.gamma

    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    records = optimize(toy_loss, p.arrays(), next_batch, cfg.max_steps, opt,
                       lambda: toy_accuracy(p, test), cfg.eval_every)
    return p, records

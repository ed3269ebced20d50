"""Decoding probes on frozen boundary states, and the onion featurizer.

Probe kinds:

* ``linear`` / ``mlp``: map ``h_L`` to all ``l_max`` position distributions at once.
* ``gru-ar`` / ``gru-noinput``: a freshly initialised GRU decoder started from
  ``h_L``, fed its previous output or PAD respectively.
* ``onion``: peels the state one position at a time, classifying the
  dominant token with an LN-MLP and subtracting its scaled embedding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import autodiff as ad
from .core.autodiff import Tensor
from .core.layers import mlp_layer_norm
from .core.optim import AdamW
from .core.rng import make_rng
from .gru import DecodeMode, Feedback, GruParams, Net, boundary_states, decode_batch, decode_loss, greedy_from_states, sequence_matches
from .interventions.onion import OnionParams, scale_tensor
from .taskgen import Corpus, TaskConfig
from .trainer import RunRecord, TrainConfig, optimize

PROBE_KINDS = ("linear", "mlp", "gru-ar", "gru-noinput", "onion")


@dataclass
class ProbeParams:
    kind: str
    arrays: dict[str, np.ndarray]
    n_symbols: int
    l_max: int
    meta: dict = field(default_factory=dict)


def init_probe(kind: str, hidden_size: int, task: TaskConfig, rng: np.random.Generator,
               dtype=np.float32) -> ProbeParams:
    n, ns, lm = hidden_size, task.n_symbols, task.l_max
    bound = 1.0 / np.sqrt(n)
    if kind == "linear":
        arrays = {"W": rng.uniform(-bound, bound, (n, ns * lm)).astype(dtype), "b": np.zeros(ns * lm, dtype)}
    elif kind == "mlp":
        hid = 4 * n
        arrays = {"W1": rng.uniform(-bound, bound, (n, hid)).astype(dtype), "b1": np.zeros(hid, dtype),
                  "W2": rng.uniform(-1 / np.sqrt(hid), 1 / np.sqrt(hid), (hid, ns * lm)).astype(dtype),
                  "b2": np.zeros(ns * lm, dtype)}
    elif kind in ("gru-ar", "gru-noinput"):
        arrays = GruParams.init(n, ns, rng, dtype).arrays()
    elif kind == "onion":
        hid = 4 * n
        arrays = {"E": rng.normal(0.0, bound, (ns, n)).astype(dtype),
                  "g": np.ones(n, dtype), "gamma": np.full(n, 0.5, dtype),
                  "beta": np.zeros(n, dtype), "b": np.zeros(n, dtype),
                  "W1": rng.uniform(-bound, bound, (n, hid)).astype(dtype), "b1": np.zeros(hid, dtype),
                  "W2": rng.uniform(-1 / np.sqrt(hid), 1 / np.sqrt(hid), (hid, ns)).astype(dtype),
                  "b2": np.zeros(ns, dtype)}
    else:
        raise ValueError(f"unknown probe kind {kind!r}")
    return ProbeParams(kind, arrays, ns, lm)


# -- forward passes ---------------------------------------------------------------

def _flat_logits(kind: str, P: dict[str, Tensor], h: Tensor, n_symbols: int) -> Tensor:
    if kind == "linear":
        out = h @ P["W"] + P["b"]
    else:
        out = ad.relu(h @ P["W1"] + P["b1"]) @ P["W2"] + P["b2"]
    return ad.reshape(out, (-1, n_symbols))  # rows ordered (example, position)


def _onion_classify(P: dict[str, Tensor], h: Tensor) -> Tensor:
    return mlp_layer_norm(h, P["W1"], P["b1"], P["W2"], P["b2"])


def onion_probe_steps(P: dict[str, Tensor], h: Tensor, steps: int,
                      teacher: np.ndarray | None = None) -> tuple[list[Tensor], np.ndarray]:
    """Run the peeling recurrence; subtract gold tokens if ``teacher`` is given, else predictions."""
    preds = np.zeros((h.shape[0], steps), dtype=np.int64)
    logits = []
    for t in range(1, steps + 1):
        logit = _onion_classify(P, h)
        logits.append(logit)
        preds[:, t - 1] = logit.data.argmax(axis=1)
        if t == steps:
            break
        tok = teacher[:, t - 1] if teacher is not None else preds[:, t - 1]
        h = h - scale_tensor(P, np.full(h.shape[0], t)) * ad.take_rows(P["E"], tok)
    return logits, preds


def probe_loss(P: dict[str, Tensor], kind: str, h: np.ndarray, tokens: np.ndarray, lengths: np.ndarray,
               n_symbols: int, l_max: int) -> Tensor:
    mask = np.arange(l_max)[None, :] < lengths[:, None]
    if kind in ("linear", "mlp"):
        logits = _flat_logits(kind, P, Tensor(h), n_symbols)
        return ad.cross_entropy(logits, tokens[:, :l_max].reshape(-1), mask.reshape(-1))
    steps = int(lengths.max())
    if kind == "onion":
        logits, _ = onion_probe_steps(P, Tensor(h), steps, teacher=tokens)
        return decode_loss(logits, tokens, lengths)
    net = Net(P)
    mode = DecodeMode.AUTOREGRESSIVE if kind == "gru-ar" else DecodeMode.NO_INPUT
    logits, _ = decode_batch(net, Tensor(h), lengths, mode, Feedback.TEACHER_FORCED, targets=tokens)
    return decode_loss(logits, tokens, lengths)


def probe_predict(probe: ProbeParams, h: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Greedy predictions (n, max L) for boundary states ``h``."""
    lengths = np.asarray(lengths, dtype=np.int64)
    P = {k: Tensor(v) for k, v in probe.arrays.items()}
    kind = probe.kind
    if kind in ("linear", "mlp"):
        logits = _flat_logits(kind, P, Tensor(h), probe.n_symbols).data
        return logits.reshape(len(h), probe.l_max, probe.n_symbols).argmax(axis=2)[:, : int(lengths.max())]
    if kind == "onion":
        return onion_probe_steps(P, Tensor(h), int(lengths.max()))[1]
    mode = DecodeMode.AUTOREGRESSIVE if kind == "gru-ar" else DecodeMode.NO_INPUT
    return greedy_from_states(GruParams(**probe.arrays), h, lengths, mode)


def probe_accuracy(probe: ProbeParams, h: np.ndarray, tokens: np.ndarray, lengths: np.ndarray) -> dict[str, float]:
    """Sequence exact match and per-token accuracy over valid positions."""
    lengths = np.asarray(lengths, dtype=np.int64)
    preds = probe_predict(probe, h, lengths)
    steps = preds.shape[1]
    valid = np.arange(steps)[None, :] < lengths[:, None]
    correct = (preds == np.asarray(tokens)[:, :steps]) & valid
    return {"sequence": float(sequence_matches(preds, tokens, lengths).mean()),
            "token": float(correct.sum() / valid.sum())}


def train_probe(kind: str, model: GruParams, cfg: TrainConfig, task: TaskConfig, train: Corpus,
                test: Corpus | None = None, train_states: np.ndarray | None = None,
                ) -> tuple[ProbeParams, list[RunRecord]]:
    """Fit a probe on (boundary state, full sequence) pairs from the frozen model."""
    probe = init_probe(kind, model.hidden_size, task, make_rng(cfg.seed, "probe-init", kind))
    h_train = train_states if train_states is not None else boundary_states(model, train.tokens, train.lengths)
    tokens = train.tokens.astype(np.int64)
    lengths = train.lengths.astype(np.int64)
    rng = make_rng(cfg.seed, "probe-batches", kind)

    def next_batch(step):
        idx = rng.integers(0, len(lengths), cfg.batch_size)
        return kind, h_train[idx], tokens[idx], lengths[idx], task.n_symbols, task.l_max

    eval_fn = None
    if test is not None:
        h_test = boundary_states(model, test.tokens, test.lengths)
        eval_fn = lambda: probe_accuracy(probe, h_test, test.tokens, test.lengths)["sequence"]  # noqa: E731
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    records = optimize(probe_loss, probe.arrays, next_batch, cfg.max_steps, opt, eval_fn, cfg.eval_every)
    return probe, records


def onion_probe_decode(probe: ProbeParams, h: np.ndarray, length: int) -> list[int]:
    if length < 1:
        raise ValueError("length must be >= 1")
    P = {k: Tensor(v) for k, v in probe.arrays.items()}
    _, preds = onion_probe_steps(P, Tensor(np.asarray(h, np.float32)[None]), length)
    return [int(t) for t in preds[0]]


# -- featurizer ---------------------------------------------------------------------

@dataclass
class Featurization:
    features: np.ndarray  # (L, N): embedding of the predicted token at each position
    residual: np.ndarray  # (N,)
    tokens: tuple[int, ...]
    scales: np.ndarray  # (L, N)
    variant: str


def _scales(op: OnionParams, length: int) -> np.ndarray:
    P = {k: Tensor(v) for k, v in op.arrays().items()}
    return scale_tensor(P, np.arange(1, length + 1)).data


def featurize(h: np.ndarray, probe: ProbeParams, op: OnionParams, length: int,
              variant: str = "consistent", tokens: tuple[int, ...] | None = None) -> Featurization:
    """Split a state into per-position token embeddings plus a residual.

    ``variant="literal"`` removes the scaled embeddings of positions 2..L
    only, so its inverse adds position 1 back twice; ``"consistent"`` removes
    positions 1..L and inverts exactly. ``tokens`` overrides the probe's
    predictions.
    """
    if variant not in ("literal", "consistent"):
        raise ValueError(f"unknown variant {variant!r}")
    if tokens is None:
        tokens = tuple(onion_probe_decode(probe, h, length))
    feats = op.E[np.asarray(tokens)]
    scales = _scales(op, length)
    first = 1 if variant == "literal" else 0
    residual = np.asarray(h) - (feats[first:] * scales[first:]).sum(axis=0)
    return Featurization(feats, residual, tuple(tokens), scales, variant)


def defeaturize(f: Featurization) -> np.ndarray:
    return f.residual + (f.features * f.scales).sum(axis=0)


def reconstruction_error(h: np.ndarray, f: Featurization) -> float:
    """Relative reconstruction error ``|F^-1(F(h)) - h| / |h|`` (Euclidean)."""
    return float(np.linalg.norm(defeaturize(f) - h) / max(np.linalg.norm(h), 1e-12))


def onion_interchange(op: OnionParams, probe: ProbeParams, h_a: np.ndarray, b_tokens, j: int,
                      length: int | None = None) -> np.ndarray:
    """Featurizer-route interchange: swap feature ``j`` of ``F(h_a)`` for ``E'[b_j]`` and invert."""
    length = length or len(b_tokens)
    fa = featurize(h_a, probe, op, length)
    feats = fa.features.copy()
    feats[j - 1] = op.E[b_tokens[j - 1]]
    return defeaturize(Featurization(feats, fa.residual, fa.tokens, fa.scales, fa.variant))

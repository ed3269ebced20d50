"""Single-layer GRU for the repeat task.

Row-vector convention throughout: ``x @ W`` rather than ``W x``. The
update, reset and candidate transforms are

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    u = tanh(x W_h + (r * h) U_h + b_h)
    h' = (1 - z) * h + z * u

and the output head is ``softmax(h W_o + b_o)`` over the full vocabulary
(symbols plus S and PAD). Encoding consumes the tokens then S; the state
after S is the boundary state ``h_L`` that all interventions and probes act
on. The first output is read from that state directly, and every later
output follows one more step fed with the previous token (autoregressive)
or with PAD (no-input).
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from .core import autodiff as ad
from .core.autodiff import Tensor
from .taskgen import Corpus, RepeatExample

PARAM_NAMES = ("E", "W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h", "W_o", "b_o")


class DecodeMode(str, Enum):
    AUTOREGRESSIVE = "ar"
    NO_INPUT = "noinput"


class Feedback(str, Enum):
    TEACHER_FORCED = "teacher"
    SELF_FED = "self"


@dataclass
class GruParams:
    E: np.ndarray
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_h: np.ndarray
    U_h: np.ndarray
    b_h: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.W_z.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.vocab_size - 2

    def arrays(self) -> dict[str, np.ndarray]:
        """Name -> array view in declaration order (shared storage, not copies)."""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> GruParams:
        return GruParams(**{k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> GruParams:
        return GruParams(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def validate(self) -> None:
        n, v = self.hidden_size, self.vocab_size
        expected = {"E": (v, n), "W_o": (n, v), "b_o": (v,)}
        for gate in "zrh":
            expected[f"W_{gate}"] = (n, n)
            expected[f"U_{gate}"] = (n, n)
            expected[f"b_{gate}"] = (n,)
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"parameter {name} has shape {got}, expected {shape}")

    @classmethod
    def init(cls, hidden_size: int, n_symbols: int, rng: np.random.Generator,
             dtype=np.float32) -> GruParams:
        n, v = hidden_size, n_symbols + 2
        bound = 1.0 / np.sqrt(n)

        def mat(rows, cols):
            return rng.uniform(-bound, bound, (rows, cols)).astype(dtype)

        def zeros(k):
            return np.zeros(k, dtype=dtype)

        return cls(
            E=rng.normal(0.0, bound, (v, n)).astype(dtype),
            W_z=mat(n, n), U_z=mat(n, n), b_z=zeros(n),
            W_r=mat(n, n), U_r=mat(n, n), b_r=zeros(n),
            W_h=mat(n, n), U_h=mat(n, n), b_h=zeros(n),
            W_o=mat(n, v), b_o=zeros(v),
        )

    @classmethod
    def zeros(cls, hidden_size: int, n_symbols: int, dtype=np.float32) -> GruParams:
        n, v = hidden_size, n_symbols + 2
        shapes = {"E": (v, n), "W_o": (n, v), "b_o": (v,)}
        for gate in "zrh":
            shapes[f"W_{gate}"] = (n, n)
            shapes[f"U_{gate}"] = (n, n)
            shapes[f"b_{gate}"] = (n,)
        return cls(**{k: np.zeros(shapes[k], dtype=dtype) for k in PARAM_NAMES})


class Net:
    """The GRU equations over a dict of tensors (trainable or frozen).

    The three input transforms and the two gate recurrences are concatenated
    once per forward pass so every timestep costs two hidden matmuls.
    """

    def __init__(self, P: dict[str, Tensor]):
        self.P = P
        self.n = P["W_z"].shape[0]
        # every input is an embedding row, so project the whole table once
        self.E_in = P["E"] @ ad.concat([P["W_z"], P["W_r"], P["W_h"]], axis=1)
        self.U_zr = ad.concat([P["U_z"], P["U_r"]], axis=1)
        self.b_zr = ad.concat([P["b_z"], P["b_r"]], axis=0)

    @classmethod
    def frozen(cls, params: GruParams) -> Net:
        return cls({k: Tensor(v, name=k) for k, v in params.arrays().items()})

    def project(self, ids: np.ndarray) -> Tensor:
        """Input projections ``E[ids] @ [W_z|W_r|W_h]`` for a 1-D id array."""
        return ad.take_rows(self.E_in, np.asarray(ids))

    def step(self, h: Tensor, xproj: Tensor, active: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """One GRU update; rows with ``active == 0`` keep their state."""
        n = self.n
        zr = ad.sigmoid(xproj[:, : 2 * n] + h @ self.U_zr + self.b_zr)
        z = zr[:, :n]
        r = zr[:, n:]
        u = ad.tanh(xproj[:, 2 * n:] + (r * h) @ self.P["U_h"] + self.P["b_h"])
        gate = z if active is None else z * active
        return h + gate * (u - h), z

    def logits(self, h: Tensor) -> Tensor:
        return h @ self.P["W_o"] + self.P["b_o"]


def _encode_ids(tokens: np.ndarray, lengths: np.ndarray, n_symbols: int) -> np.ndarray:
    """Input id matrix for encoding: tokens, then S at index L, then PAD filler."""
    b, l_max = tokens.shape
    ids = np.full((b, l_max + 1), n_symbols + 1, dtype=np.int64)
    cols = np.arange(l_max + 1)[None, :]
    ids[:, :l_max] = np.where(cols[:, :l_max] < lengths[:, None], tokens, n_symbols + 1)
    ids[np.arange(b), lengths] = n_symbols
    return ids


def encode_batch(net: Net, tokens: np.ndarray, lengths: np.ndarray,
                 return_gates: bool = False) -> tuple[Tensor, list[Tensor]]:
    """Boundary states (after S) for a right-padded batch; optionally all update gates.

    Rows stop updating once their S token has been consumed, so the returned
    state is each row's own boundary state.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    n_symbols = net.P["E"].shape[0] - 2
    steps = int(lengths.max()) + 1
    ids = _encode_ids(np.asarray(tokens)[:, : steps - 1], lengths, n_symbols)
    dtype = net.P["E"].dtype
    h = Tensor(np.zeros((len(lengths), net.n), dtype=dtype))
    gates = []
    for t in range(steps):
        active = (t <= lengths).astype(dtype)[:, None]
        h, z = net.step(h, net.project(ids[:, t]), None if active.all() else active)
        if return_gates:
            gates.append(z)
    return h, gates


def decode_batch(net: Net, h: Tensor, lengths: np.ndarray, mode: DecodeMode,
                 feedback: Feedback = Feedback.SELF_FED,
                 targets: np.ndarray | None = None) -> tuple[list[Tensor], np.ndarray]:
    """Greedy decoding from boundary states for ``max(lengths)`` steps.

    Returns per-step logits and the (batch, steps) greedy predictions with
    special tokens excluded from the argmax. ``targets`` are needed for
    teacher forcing.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    mode = DecodeMode(mode)
    feedback = Feedback(feedback)
    n_symbols = net.P["E"].shape[0] - 2
    steps = int(lengths.max())
    batch = len(lengths)
    preds = np.zeros((batch, steps), dtype=np.int64)
    fixed = None
    if mode is DecodeMode.NO_INPUT:
        fixed = net.project(np.full(1, n_symbols + 1))
    elif feedback is Feedback.TEACHER_FORCED and targets is None:
        raise ValueError("teacher forcing needs targets")
    out = []
    for j in range(steps):
        logit = net.logits(h)
        out.append(logit)
        preds[:, j] = logit.data[:, :n_symbols].argmax(axis=1)
        if j == steps - 1:
            break
        if mode is DecodeMode.NO_INPUT:
            xproj = fixed
        elif feedback is Feedback.TEACHER_FORCED:
            xproj = net.project(np.asarray(targets, dtype=np.int64)[:, j])
        else:
            xproj = net.project(preds[:, j])
        h, _ = net.step(h, xproj)
    return out, preds


def decode_loss(logits: list[Tensor], targets: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Mean cross-entropy over the valid decode positions of a batch."""
    steps = len(logits)
    stacked = ad.reshape(ad.stack(logits, axis=1), (-1, logits[0].shape[1]))
    tgt = np.zeros((len(lengths), steps), dtype=np.int64)
    tgt[:, :] = np.asarray(targets)[:, :steps]
    mask = np.arange(steps)[None, :] < np.asarray(lengths)[:, None]
    return ad.cross_entropy(stacked, tgt.reshape(-1), mask.reshape(-1))


def batch_loss(P: dict[str, Tensor], tokens: np.ndarray, lengths: np.ndarray,
               mode: DecodeMode, feedback: Feedback) -> Tensor:
    net = Net(P)
    h, _ = encode_batch(net, tokens, lengths)
    logits, _ = decode_batch(net, h, lengths, mode, feedback, targets=tokens)
    return decode_loss(logits, tokens, lengths)


# -- single-example API --------------------------------------------------------

def gru_step(params: GruParams, h: np.ndarray, token: int) -> tuple[np.ndarray, np.ndarray]:
    """One step from state ``h`` (N,) on ``token``; returns (h', z)."""
    if not 0 <= token < params.vocab_size:
        raise ValueError(f"token {token} outside vocabulary of size {params.vocab_size}")
    net = Net.frozen(params)
    h2, z = net.step(Tensor(np.asarray(h, dtype=params.E.dtype)[None, :]), net.project(np.array([token])))
    return h2.data[0], z.data[0]


@dataclass
class GateTrace:
    gates: np.ndarray  # (N, L+1): update gate per channel per step
    boundary: int  # column index of the S step

    @property
    def shape(self) -> tuple[int, int]:
        return self.gates.shape


def encode(params: GruParams, example: RepeatExample | tuple[int, ...]) -> tuple[np.ndarray, GateTrace]:
    tokens = example.tokens if isinstance(example, RepeatExample) else tuple(example)
    net = Net.frozen(params)
    arr = np.array([tokens], dtype=np.int64)
    h, gates = encode_batch(net, arr, np.array([len(tokens)]), return_gates=True)
    trace = np.stack([g.data[0] for g in gates], axis=1)
    return h.data[0], GateTrace(trace, len(tokens))


def decode(params: GruParams, h: np.ndarray, length: int, mode: DecodeMode) -> list[int]:
    if length < 1:
        raise ValueError("decode length must be >= 1")
    net = Net.frozen(params)
    _, preds = decode_batch(net, Tensor(np.asarray(h, dtype=params.E.dtype)[None, :]),
                            np.array([length]), mode)
    return [int(t) for t in preds[0]]


def sequence_loss(params: GruParams, example: RepeatExample | tuple[int, ...], mode: DecodeMode,
                  feedback: Feedback = Feedback.TEACHER_FORCED) -> float:
    tokens = example.tokens if isinstance(example, RepeatExample) else tuple(example)
    P = {k: Tensor(v) for k, v in params.arrays().items()}
    return float(batch_loss(P, np.array([tokens]), np.array([len(tokens)]), mode, feedback).data)


def gate_traces(params: GruParams, corpus: Corpus) -> np.ndarray:
    """Update gates for a whole corpus: (n, steps, N), valid through each row's S step."""
    net = Net.frozen(params)
    _, gates = encode_batch(net, corpus.tokens.astype(np.int64), corpus.lengths, return_gates=True)
    return np.stack([g.data for g in gates], axis=1)


# -- corpus-level evaluation ----------------------------------------------------

def boundary_states(params: GruParams, tokens: np.ndarray, lengths: np.ndarray,
                    chunk: int = 2048) -> np.ndarray:
    net = Net.frozen(params)
    out = []
    for i in range(0, len(lengths), chunk):
        h, _ = encode_batch(net, tokens[i:i + chunk].astype(np.int64), lengths[i:i + chunk])
        out.append(h.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.hidden_size), params.E.dtype)


def greedy_from_states(params: GruParams, h: np.ndarray, lengths: np.ndarray, mode: DecodeMode,
                       chunk: int = 2048) -> np.ndarray:
    """Greedy native-mode predictions (n, max L) from boundary states."""
    net = Net.frozen(params)
    l_max = int(np.max(lengths)) if len(lengths) else 0
    preds = np.zeros((len(lengths), l_max), dtype=np.int64)
    for i in range(0, len(lengths), chunk):
        lens = lengths[i:i + chunk]
        _, p = decode_batch(net, Tensor(h[i:i + chunk]), lens, mode)
        preds[i:i + chunk, : p.shape[1]] = p
    return preds


def sequence_matches(preds: np.ndarray, targets: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Per-row exact match over each row's first ``L`` positions."""
    steps = preds.shape[1]
    valid = np.arange(steps)[None, :] < np.asarray(lengths)[:, None]
    wrong = (preds != np.asarray(targets)[:, :steps]) & valid
    return ~wrong.any(axis=1)


def exact_match(params: GruParams, corpus: Corpus, mode: DecodeMode) -> float:
    if len(corpus) == 0:
        raise ValueError("exact_match needs a non-empty dataset")
    h = boundary_states(params, corpus.tokens, corpus.lengths)
    preds = greedy_from_states(params, h, corpus.lengths.astype(np.int64), mode)
    return float(sequence_matches(preds, corpus.tokens, corpus.lengths).mean())

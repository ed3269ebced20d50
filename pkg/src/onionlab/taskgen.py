"""Repeat-task data: the base corpus and the three intervention datasets.

Tokens are ids ``0 .. n_symbols-1``; two special ids follow them: the
start-of-repeat marker ``S = n_symbols`` and ``PAD = n_symbols + 1`` (fed
during decoding by models without autoregressive input). Positions in the
public records are 1-based.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .container import write_atomic as _atomic_write
from .core.rng import make_rng

CORPUS_MAGIC = b"ONCORP1"


class GenerationExhausted(RuntimeError):
    """Disjoint train/test sets cannot be drawn from the configured sequence space."""


@dataclass(frozen=True)
class TaskConfig:
    n_symbols: int = 30
    l_max: int = 9
    train_size: int = 1_000_000
    test_size: int = 5_000
    seed: int = 0

    def __post_init__(self):
        if self.n_symbols < 1 or self.l_max < 1:
            raise ValueError(f"invalid task config: n_symbols={self.n_symbols}, l_max={self.l_max}")
        if self.train_size < 0 or self.test_size < 0:
            raise ValueError("dataset sizes must be non-negative")

    @property
    def start_token(self) -> int:
        return self.n_symbols

    @property
    def pad_token(self) -> int:
        return self.n_symbols + 1

    @property
    def vocab_size(self) -> int:
        return self.n_symbols + 2

    def space_size(self) -> int:
        """Number of distinct sequences with length 1..l_max."""
        return int(np.sum([self.n_symbols ** k for k in range(1, self.l_max + 1)], dtype=object))


@dataclass(frozen=True)
class RepeatExample:
    tokens: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class CounterfactualExample:
    y: tuple[int, ...]
    b: tuple[int, ...]
    s: tuple[int, ...]
    positions: tuple[int, ...]  # intervened positions I, 1-based
    granularity: str = "unigram"

    @property
    def length(self) -> int:
        return len(self.y)

    def variables(self) -> tuple[int, ...]:
        """Causal variables to patch: positions for unigrams, bigram indices for bigrams."""
        if self.granularity == "unigram":
            return self.positions
        return bigram_variables(self.positions[0], self.length)


@dataclass(frozen=True)
class OnionEditExample:
    base: tuple[int, ...]
    j: int  # 1-based
    old_token: int
    new_token: int

    @property
    def target(self) -> tuple[int, ...]:
        t = list(self.base)
        t[self.j - 1] = self.new_token
        return tuple(t)


@dataclass
class Corpus:
    """Sequences packed into a right-padded matrix plus their lengths."""

    tokens: np.ndarray  # (n, l_max) uint8, zeros past each length
    lengths: np.ndarray  # (n,) uint8
    l_max: int = field(default=9)

    def __len__(self) -> int:
        return len(self.lengths)

    def example(self, i: int) -> RepeatExample:
        return RepeatExample(tuple(int(t) for t in self.tokens[i, : self.lengths[i]]))

    def examples(self) -> Iterator[RepeatExample]:
        for i in range(len(self)):
            yield self.example(i)

    def keys(self) -> set[bytes]:
        return {_key(self.tokens[i, : self.lengths[i]]) for i in range(len(self))}

    def subset(self, idx) -> Corpus:
        return Corpus(self.tokens[idx], self.lengths[idx], self.l_max)

    @classmethod
    def from_examples(cls, examples: Iterable[RepeatExample | Iterable[int]], l_max: int) -> Corpus:
        seqs = [e.tokens if isinstance(e, RepeatExample) else tuple(e) for e in examples]
        tokens = np.zeros((len(seqs), l_max), dtype=np.uint8)
        lengths = np.zeros(len(seqs), dtype=np.uint8)
        for i, s in enumerate(seqs):
            tokens[i, : len(s)] = s
            lengths[i] = len(s)
        return cls(tokens, lengths, l_max)


def _key(seq) -> bytes:
    return bytes(np.asarray(seq, dtype=np.uint8))


# -- sampling ----------------------------------------------------------------

def sample_repeat_example(rng: np.random.Generator, cfg: TaskConfig) -> RepeatExample:
    length = int(rng.integers(1, cfg.l_max + 1))
    return RepeatExample(tuple(int(t) for t in rng.integers(0, cfg.n_symbols, length)))


def _sample_block(rng: np.random.Generator, cfg: TaskConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = rng.integers(1, cfg.l_max + 1, n).astype(np.uint8)
    tokens = rng.integers(0, cfg.n_symbols, (n, cfg.l_max)).astype(np.uint8)
    tokens[np.arange(cfg.l_max)[None, :] >= lengths[:, None]] = 0
    return tokens, lengths


def build_corpus(cfg: TaskConfig, max_rounds: int = 1000) -> tuple[Corpus, Corpus]:
    """Train and test corpora, disjoint at the exact-sequence level.

    Train sequences are drawn with replacement. Test candidates that occur in
    train are rejected and redrawn, for at most ``max_rounds`` rounds.
    """
    if cfg.test_size and cfg.space_size() < cfg.train_size + cfg.test_size:
        raise GenerationExhausted(
            f"sequence space has {cfg.space_size()} members, fewer than "
            f"train+test={cfg.train_size + cfg.test_size}")

    rng = make_rng(cfg.seed, "corpus", "train")
    train_tok, train_len = _sample_block(rng, cfg, cfg.train_size)
    train = Corpus(train_tok, train_len, cfg.l_max)
    seen = train.keys()

    rng = make_rng(cfg.seed, "corpus", "test")
    kept_tok, kept_len = [], []
    need = cfg.test_size
    for _ in range(max_rounds):
        if need == 0:
            break
        tok, lens = _sample_block(rng, cfg, max(need * 2, 64))
        for i in range(len(lens)):
            if _key(tok[i, : lens[i]]) not in seen:
                kept_tok.append(tok[i])
                kept_len.append(lens[i])
                need -= 1
                if need == 0:
                    break
    if need:
        raise GenerationExhausted(f"could only draw {cfg.test_size - need} of {cfg.test_size} test sequences")
    test = Corpus(np.array(kept_tok, dtype=np.uint8).reshape(-1, cfg.l_max),
                  np.array(kept_len, dtype=np.uint8), cfg.l_max)
    return train, test


def _random_tokens(rng: np.random.Generator, cfg: TaskConfig, n: int) -> list[int]:
    return [int(t) for t in rng.integers(0, cfg.n_symbols, n)]


def _draw_base(rng: np.random.Generator, cfg: TaskConfig, pool: Corpus | None, min_len: int = 1) -> tuple[int, ...]:
    while True:
        if pool is None:
            y = sample_repeat_example(rng, cfg).tokens
        else:
            y = pool.example(int(rng.integers(len(pool)))).tokens
        if len(y) >= min_len:
            return y


def make_unigram_counterfactual(rng: np.random.Generator, cfg: TaskConfig,
                                pool: Corpus | None = None) -> CounterfactualExample:
    """Counterfactual triple for unigram interchange.

    ``y`` is drawn from ``pool`` when given, otherwise sampled fresh. Every
    position joins I with probability 1/2 (redrawn until I is non-empty).
    The base is randomised on I and the source off I.
    """
    y = _draw_base(rng, cfg, pool)
    length = len(y)
    while True:
        chosen = rng.random(length) < 0.5
        if chosen.any():
            break
    fresh_b = _random_tokens(rng, cfg, length)
    fresh_s = _random_tokens(rng, cfg, length)
    b = tuple(fresh_b[k] if chosen[k] else y[k] for k in range(length))
    s = tuple(y[k] if chosen[k] else fresh_s[k] for k in range(length))
    positions = tuple(int(k) + 1 for k in np.flatnonzero(chosen))
    return CounterfactualExample(y, b, s, positions, "unigram")


def bigram_variables(j: int, length: int) -> tuple[int, ...]:
    """Bigram indices touched by editing position ``j`` (1-based): {j-1, j} within [1, L-1]."""
    return tuple(v for v in (j - 1, j) if 1 <= v <= length - 1)


def make_bigram_counterfactual(rng: np.random.Generator, cfg: TaskConfig,
                               pool: Corpus | None = None) -> CounterfactualExample:
    """Single-position counterfactual whose source shares the edited token's neighbours.

    The base differs from ``y`` only at ``j`` (with a different token); the
    source carries ``y[j]`` at ``j``, copies the base at ``j-1`` and ``j+1`` and
    is random elsewhere.
    """
    if cfg.n_symbols < 2:
        raise ValueError("bigram counterfactuals need at least two symbols")
    y = _draw_base(rng, cfg, pool, min_len=2)
    length = len(y)
    j = int(rng.integers(1, length + 1))
    k = j - 1
    replacement = int(rng.integers(0, cfg.n_symbols - 1))
    if replacement >= y[k]:
        replacement += 1
    b = list(y)
    b[k] = replacement
    s = _random_tokens(rng, cfg, length)
    s[k] = y[k]
    for n in (k - 1, k + 1):
        if 0 <= n < length:
            s[n] = b[n]
    return CounterfactualExample(tuple(y), tuple(b), tuple(s), (j,), "bigram")


def make_onion_edit(rng: np.random.Generator, base: RepeatExample | tuple[int, ...],
                    n_symbols: int) -> OnionEditExample:
    tokens = base.tokens if isinstance(base, RepeatExample) else tuple(base)
    if n_symbols < 2:
        raise ValueError("onion edits need at least two symbols")
    j = int(rng.integers(1, len(tokens) + 1))
    old = tokens[j - 1]
    new = int(rng.integers(0, n_symbols - 1))
    if new >= old:
        new += 1
    return OnionEditExample(tuple(tokens), j, int(old), new)


# -- persistence ----------------------------------------------------------------

def write_corpus(path: str | Path, corpus: Corpus) -> None:
    """Little-endian: magic, u32 count, then per record u8 length + u8 tokens."""
    parts = [CORPUS_MAGIC, struct.pack("<I", len(corpus))]
    for i in range(len(corpus)):
        n = int(corpus.lengths[i])
        parts.append(bytes([n]))
        parts.append(corpus.tokens[i, :n].astype(np.uint8).tobytes())
    _atomic_write(Path(path), b"".join(parts))


def read_corpus(path: str | Path, l_max: int) -> Corpus:
    raw = Path(path).read_bytes()
    if raw[: len(CORPUS_MAGIC)] != CORPUS_MAGIC:
        raise ValueError(f"{path}: bad corpus magic")
    pos = len(CORPUS_MAGIC)
    if len(raw) < pos + 4:
        raise ValueError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tokens = np.zeros((count, l_max), dtype=np.uint8)
    lengths = np.zeros(count, dtype=np.uint8)
    for i in range(count):
        if pos >= len(raw):
            raise ValueError(f"{path}: truncated at record {i}")
        n = raw[pos]
        pos += 1
        if n > l_max or pos + n > len(raw):
            raise ValueError(f"{path}: bad record {i} (length {n})")
        tokens[i, :n] = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos)
        lengths[i] = n
        pos += n
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return Corpus(tokens, lengths, l_max)


def write_records(path: str | Path, records: Iterable) -> None:
    lines = []
    for r in records:
        if isinstance(r, CounterfactualExample):
            d = {"y": list(r.y), "b": list(r.b), "s": list(r.s), "I": list(r.positions),
                 "granularity": r.granularity}
        else:
            d = {"base": list(r.base), "j": r.j, "old": r.old_token, "new": r.new_token}
        lines.append(json.dumps(d, separators=(",", ":")))
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_records(path: str | Path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "y" in d:
            out.append(CounterfactualExample(tuple(d["y"]), tuple(d["b"]), tuple(d["s"]),
                                             tuple(d["I"]), d.get("granularity", "unigram")))
        else:
            out.append(OnionEditExample(tuple(d["base"]), d["j"], d["old"], d["new"]))
    return out


def config_dict(cfg: TaskConfig) -> dict:
    return asdict(cfg)

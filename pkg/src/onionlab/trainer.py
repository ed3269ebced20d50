"""Training loops, run records and checkpoint I/O."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import container
from .core.autodiff import NumericError, Tensor, forward_backward
from .core.optim import AdamW
from .core.rng import make_rng
from .gru import DecodeMode, Feedback, GruParams, batch_loss, exact_match
from .taskgen import Corpus, TaskConfig, build_corpus

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_steps: int = 40_000
    lr: float = 1e-3
    weight_decay: float = 0.1
    seed: int = 0
    eval_every: int = 1000
    hidden_sizes: tuple[int, ...] = (48, 64, 128, 256, 512, 1024)
    feedback: str = "self"

    def __post_init__(self):
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1:
            raise ValueError(f"invalid train config: {self}")
        self.hidden_sizes = tuple(self.hidden_sizes)


PROFILES = {
    # CPU-feasible reproduction target
    "desk": (TaskConfig(train_size=200_000), TrainConfig(max_steps=10_000, hidden_sizes=(48, 64, 128))),
    "full": (TaskConfig(), TrainConfig()),
}


@dataclass
class RunRecord:
    step: int
    train_loss: float
    eval_accuracy: float | None = None
    wall_time: float = field(default=0.0, compare=False)

    def metrics(self) -> dict:
        """The reproducible part of the record (wall time excluded)."""
        d = {"step": self.step, "train_loss": self.train_loss}
        if self.eval_accuracy is not None:
            d["eval_accuracy"] = self.eval_accuracy
        return d


def metrics_lines(records: list[RunRecord]) -> str:
    return "".join(json.dumps(r.metrics(), sort_keys=True) + "\n" for r in records)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless epoch-shuffled index batches."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]
        if n < batch_size:
            yield perm


def optimize(loss_fn: Callable[..., Tensor], params: dict[str, np.ndarray], next_batch: Callable[[int], tuple],
             steps: int, opt: AdamW, eval_fn: Callable[[], float] | None = None, eval_every: int = 1000,
             on_eval: Callable[[RunRecord], None] | None = None, trainable: set[str] | None = None) -> list[RunRecord]:
    """Generic AdamW loop.

    ``next_batch(step)`` returns extra positional arguments for
    ``loss_fn(tensors, *args)``. Only names in ``trainable`` (default: all)
    are updated. A record is logged every ``eval_every`` steps with the mean
    training loss since the previous record.
    """
    records: list[RunRecord] = []
    start = time.perf_counter()
    running, count = 0.0, 0
    names = set(params) if trainable is None else set(trainable)
    for step in range(1, steps + 1):
        args = next_batch(step)
        loss, grads = forward_backward(loss_fn, params, *args)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {step}")
        opt.step(params, {k: v for k, v in grads.items() if k in names})
        running += loss
        count += 1
        if step % eval_every == 0 or step == steps:
            acc = eval_fn() if eval_fn is not None else None
            rec = RunRecord(step, round(running / count, 6), None if acc is None else round(acc, 6),
                            time.perf_counter() - start)
            records.append(rec)
            log.info("step %d loss %.4f acc %s", step, rec.train_loss, rec.eval_accuracy)
            running, count = 0.0, 0
            if on_eval is not None:
                on_eval(rec)
    return records


def train_model(cfg: TrainConfig, task: TaskConfig, hidden_size: int, mode: DecodeMode | str,
                out_dir: str | Path | None = None, corpora: tuple[Corpus, Corpus] | None = None,
                ) -> tuple[GruParams, list[RunRecord]]:
    """Train a GRU on the repeat task; deterministic given ``cfg.seed`` and ``task.seed``.

    With ``out_dir`` the checkpoint is rewritten at every evaluation so the
    last good state survives a numeric failure, and metrics are appended.
    """
    mode = DecodeMode(mode)
    feedback = Feedback(cfg.feedback)
    train, test = corpora if corpora is not None else build_corpus(task)
    params = GruParams.init(hidden_size, task.n_symbols, make_rng(cfg.seed, "init", hidden_size))
    arrays = params.arrays()
    if cfg.max_steps == 0:
        return params, []
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    order = batches(len(train), cfg.batch_size, make_rng(cfg.seed, "batches"))
    tokens = train.tokens.astype(np.int64)
    lengths = train.lengths.astype(np.int64)
    out = Path(out_dir) if out_dir is not None else None
    meta = {"N": hidden_size, "N_S": task.n_symbols, "L_max": task.l_max, "mode": mode.value,
            "seed": cfg.seed, "feedback": feedback.value}

    def next_batch(step):
        idx = next(order)
        return tokens[idx], lengths[idx], mode, feedback

    def on_eval(rec: RunRecord):
        if out is None:
            return
        save_checkpoint(out / "model.ckpt", params, {**meta, "step": rec.step})
        with open(out / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(rec.metrics(), sort_keys=True) + "\n")

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    try:
        records = optimize(batch_loss, arrays, next_batch, cfg.max_steps, opt,
                           eval_fn=lambda: exact_match(params, test, mode),
                           eval_every=cfg.eval_every, on_eval=on_eval)
    except NumericError:
        log.error("numeric failure; last good checkpoint kept in %s", out)
        raise
    return params, records


def first_step_reaching(records: list[RunRecord], threshold: float = 0.99) -> int | None:
    for r in records:
        if r.eval_accuracy is not None and r.eval_accuracy >= threshold:
            return r.step
    return None


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path: str | Path, params: GruParams, meta: dict) -> None:
    meta = {**meta, "N": params.hidden_size, "N_S": params.n_symbols}
    container.save(path, container.CKPT_MAGIC, meta, params.arrays())


def load_checkpoint(path: str | Path) -> tuple[GruParams, dict]:
    meta, arrays = container.load(path, container.CKPT_MAGIC)
    from .gru import PARAM_NAMES

    missing = [k for k in PARAM_NAMES if k not in arrays]
    if missing:
        raise container.ContainerError(f"array '{missing[0]}': missing from checkpoint")
    params = GruParams(**{k: arrays[k] for k in PARAM_NAMES})
    for key, actual in (("N", params.hidden_size), ("N_S", params.n_symbols)):
        if key in meta and int(meta[key]) != actual:
            raise container.ContainerError(f"metadata '{key}'={meta[key]} disagrees with array shapes ({actual})")
    try:
        params.validate()
    except ValueError as err:
        raise container.ContainerError(str(err)) from None
    return params, meta


def checkpoint_roundtrip(params: GruParams, meta: dict | None = None) -> GruParams:
    raw = container.dumps(container.CKPT_MAGIC, {**(meta or {}), "N": params.hidden_size,
                                                 "N_S": params.n_symbols}, params.arrays())
    _, arrays = container.loads(raw, container.CKPT_MAGIC)
    return GruParams(**arrays)


def params_hash(params: GruParams | dict[str, np.ndarray]) -> str:
    arrays = params.arrays() if isinstance(params, GruParams) else params
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden_sizes"] = list(cfg.hidden_sizes)
    return d

"""Training and storage of everything fitted on top of a frozen GRU.

Objectives: ``das-unigram``, ``das-bigram``, ``onion``, ``onion-control``
(γ and β pinned to 1) and ``probe-<kind>`` for every probe kind. Results are
stored in the ONAUX1 container with the objective name in the metadata.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .core.rng import make_rng
from .errors import ConfigMismatch, FreezeViolation, MissingArtifact
from .gru import DecodeMode, GruParams, boundary_states
from .interventions.das import DasParams, eval_das, make_counterfactuals, train_das
from .interventions.onion import OnionParams, eval_onion, make_edits, train_onion
from .probes import PROBE_KINDS, ProbeParams, probe_accuracy, train_probe
from .taskgen import Corpus, TaskConfig
from .trainer import RunRecord, TrainConfig, params_hash
from .toymodel import ToyParams

OBJECTIVES = ("das-unigram", "das-bigram", "onion", "onion-control") + tuple(f"probe-{k}" for k in PROBE_KINDS)


@dataclass
class AuxResult:
    objective: str
    arrays: dict[str, np.ndarray]
    meta: dict
    records: list[RunRecord] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def eval_counterfactuals(granularity: str, cfg: TrainConfig, task: TaskConfig, test: Corpus):
    """Fixed held-out counterfactual set: one example per test sequence."""
    rng = make_rng(cfg.seed, "das-eval", granularity)
    return make_counterfactuals(granularity, rng, task, test, len(test))


def eval_edits(cfg: TrainConfig, task: TaskConfig, test: Corpus):
    rng = make_rng(cfg.seed, "onion-eval")
    return make_edits(rng, test, len(test), task.n_symbols, indices=np.arange(len(test)))


def check_compatible(model: GruParams, task: TaskConfig) -> None:
    if model.n_symbols != task.n_symbols:
        raise ConfigMismatch(f"checkpoint has N_S={model.n_symbols}, task expects {task.n_symbols}")


def train_auxiliary(objective: str, model: GruParams, mode: DecodeMode | str, cfg: TrainConfig, task: TaskConfig,
                    train: Corpus, test: Corpus) -> AuxResult:
    """Fit one objective against the frozen ``model``; the model hash is verified unchanged."""
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; choose from {', '.join(OBJECTIVES)}")
    check_compatible(model, task)
    mode = DecodeMode(mode)
    before = params_hash(model)
    meta = {"objective": objective, "N": model.hidden_size, "N_S": task.n_symbols, "L_max": task.l_max,
            "mode": mode.value, "seed": cfg.seed, "model_hash": before}

    if objective.startswith("das-"):
        gran = objective.split("-", 1)[1]
        examples = eval_counterfactuals(gran, cfg, task, test)
        das, records = train_das(model, gran, cfg, task, train, mode)
        metrics = {"accuracy": eval_das(model, das, examples, mode, task.l_max)}
        arrays = das.arrays()
        meta["granularity"] = gran
    elif objective.startswith("onion"):
        constraint = "free" if objective == "onion" else "fixed_gamma_beta_one"
        edits = eval_edits(cfg, task, test)
        op, records = train_onion(model, cfg, task, train, mode, constraint)
        metrics = {"accuracy": eval_onion(model, op, edits, mode, task.l_max),
                   "gamma_negative": bool((op.gamma < 0).any())}
        arrays = op.arrays()
        meta["constraint"] = constraint
    else:
        kind = objective.split("-", 1)[1]
        probe, records = train_probe(kind, model, cfg, task, train)
        h_test = boundary_states(model, test.tokens, test.lengths)
        metrics = probe_accuracy(probe, h_test, test.tokens, test.lengths)
        arrays = probe.arrays
        meta["kind"] = kind

    after = params_hash(model)
    if after != before:
        raise FreezeViolation(f"base model hash changed during {objective} training")
    return AuxResult(objective, arrays, meta, records, metrics)


# -- storage ---------------------------------------------------------------------------

def save_aux(path: str | Path, objective: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    container.save(path, container.AUX_MAGIC, {**meta, "objective": objective}, arrays)


def load_aux(path: str | Path) -> tuple[str, dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"auxiliary file not found: {path}")
    meta, arrays = container.load(path, container.AUX_MAGIC)
    if "objective" not in meta:
        raise container.ContainerError("metadata 'objective': missing")
    return meta["objective"], arrays, meta


def das_from_aux(arrays: dict[str, np.ndarray], meta: dict) -> DasParams:
    return DasParams(arrays["skew"], arrays["assign_logits"], meta["granularity"])


def onion_from_aux(arrays: dict[str, np.ndarray]) -> OnionParams:
    return OnionParams(**{k: arrays[k] for k in ("E", "g", "gamma", "beta", "b")})


def probe_from_aux(arrays: dict[str, np.ndarray], meta: dict) -> ProbeParams:
    return ProbeParams(meta["kind"], dict(arrays), int(meta["N_S"]), int(meta["L_max"]))


def toy_from_aux(arrays: dict[str, np.ndarray], meta: dict) -> ToyParams:
    return ToyParams(arrays["E"], arrays["W_o"], arrays["b_o"], float(meta.get("gamma", 0.4)))

"""Cached experiment runs shared by the command line and the acceptance suite.

Every run lives in its own directory named after the run and a key hashing
its resolved configuration together with the source of the modules that
influence numerical results. A finished run holds ``result.json``; a rerun
with the same key just reads it back.
"""
from __future__ import annotations

import functools
import hashlib
import json
import logging
import subprocess
from dataclasses import replace
from pathlib import Path

from . import __version__
from .auxiliary import AuxResult, save_aux, train_auxiliary
from .container import write_atomic
from .gru import DecodeMode, GruParams, exact_match
from .taskgen import Corpus, TaskConfig, build_corpus, config_dict as task_dict
from .toymodel import toy_train
from .trainer import PROFILES, RunRecord, TrainConfig, config_dict as train_dict, load_checkpoint, metrics_lines, params_hash, save_checkpoint, train_model

log = logging.getLogger(__name__)

# modules whose code changes invalidate cached numbers
SCIENCE_SOURCES = ("core", "gru.py", "taskgen.py", "trainer.py", "interventions", "probes.py", "toymodel.py",
                   "auxiliary.py", "container.py")

# Feedback used for every acceptance-grade base model (see README).
ACCEPTANCE_FEEDBACK = "teacher"


@functools.lru_cache(maxsize=1)
def source_hash() -> str:
    root = Path(__file__).parent
    h = hashlib.sha256()
    for name in SCIENCE_SOURCES:
        target = root / name
        files = sorted(target.rglob("*.py")) if target.is_dir() else [target]
        for f in files:
            h.update(str(f.relative_to(root)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def version_string() -> str:
    """``git describe``-style identifier, falling back to the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def run_key(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode() + source_hash().encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def corpus_hash(corpus: Corpus) -> str:
    h = hashlib.sha256()
    h.update(corpus.lengths.tobytes())
    h.update(corpus.tokens.tobytes())
    return h.hexdigest()


def write_json(path: Path, obj) -> None:
    write_atomic(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path: Path):
    return json.loads(Path(path).read_text())


def desk_configs(feedback: str = ACCEPTANCE_FEEDBACK) -> tuple[TaskConfig, TrainConfig]:
    task, cfg = PROFILES["desk"]
    return task, replace(cfg, feedback=feedback)


@functools.lru_cache(maxsize=2)
def corpora(task: TaskConfig) -> tuple[Corpus, Corpus]:
    return build_corpus(task)


def _provenance(config: dict, inputs: dict[str, str]) -> dict:
    return {"config": config, "seed": config.get("train", {}).get("seed"), "version": version_string(),
            "source_hash": source_hash(), "inputs": inputs}


# -- base models -------------------------------------------------------------------------

def model_config(task: TaskConfig, cfg: TrainConfig, n: int, mode: str) -> dict:
    return {"kind": "model", "task": task_dict(task), "train": train_dict(cfg), "N": n, "mode": DecodeMode(mode).value}


def model_dir(root: Path, task: TaskConfig, cfg: TrainConfig, n: int, mode: str) -> Path:
    config = model_config(task, cfg, n, mode)
    return Path(root) / "models" / f"n{n}_{config['mode']}_{run_key(config)}"


def ensure_model(root: Path, task: TaskConfig, cfg: TrainConfig, n: int, mode: str) -> tuple[GruParams, dict]:
    """Train (or reuse) a base model; returns parameters and its result record."""
    out = model_dir(root, task, cfg, n, mode)
    if (out / "result.json").exists():
        params, _ = load_checkpoint(out / "model.ckpt")
        return params, read_json(out / "result.json")
    config = model_config(task, cfg, n, mode)
    train, test = corpora(task)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", _provenance(config, {"train_corpus": corpus_hash(train),
                                                          "test_corpus": corpus_hash(test)}))
    log.info("training base model N=%d mode=%s into %s", n, mode, out)
    params, records = train_model(cfg, task, n, mode, out_dir=out, corpora=(train, test))
    if cfg.max_steps == 0:
        save_checkpoint(out / "model.ckpt", params, {"mode": DecodeMode(mode).value, "seed": cfg.seed, "step": 0,
                                                     "L_max": task.l_max})
    result = {"N": n, "mode": DecodeMode(mode).value, "feedback": cfg.feedback,
              "exact_match": records[-1].eval_accuracy if records else exact_match(params, test, mode),
              "steps": cfg.max_steps, "model_hash": params_hash(params)}
    write_json(out / "result.json", result)
    if records:
        write_json(out / "timing.json", {"wall_time_s": round(records[-1].wall_time, 1)})
    return params, result


# -- auxiliary objectives -------------------------------------------------------------------

def ensure_aux(root: Path, objective: str, task: TaskConfig, cfg: TrainConfig, n: int, mode: str,
               aux_cfg: TrainConfig | None = None) -> dict:
    """Train (or reuse) an intervention or probe on a cached base model."""
    aux_cfg = aux_cfg or cfg
    model, model_result = ensure_model(root, task, cfg, n, mode)
    config = {"kind": "aux", "objective": objective, "model_hash": model_result["model_hash"],
              "task": task_dict(task), "train": train_dict(aux_cfg), "N": n, "mode": DecodeMode(mode).value}
    out = Path(root) / "aux" / f"{objective}_n{n}_{config['mode']}_{run_key(config)}"
    if (out / "result.json").exists():
        return read_json(out / "result.json")
    train, test = corpora(task)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", _provenance(config, {"model": model_result["model_hash"],
                                                          "train_corpus": corpus_hash(train),
                                                          "test_corpus": corpus_hash(test)}))
    log.info("training %s on N=%d %s into %s", objective, n, mode, out)
    res: AuxResult = train_auxiliary(objective, model, mode, aux_cfg, task, train, test)
    save_aux(out / "params.aux", objective, res.arrays, res.meta)
    write_atomic(out / "metrics.jsonl", metrics_lines(res.records).encode())
    result = {"objective": objective, "N": n, "mode": DecodeMode(mode).value, **res.metrics,
              "model_hash": model_result["model_hash"], "frozen": params_hash(model) == model_result["model_hash"]}
    write_json(out / "result.json", result)
    return result


def aux_dir(root: Path, objective: str, task: TaskConfig, cfg: TrainConfig, n: int, mode: str,
            aux_cfg: TrainConfig | None = None) -> Path:
    _, model_result = ensure_model(root, task, cfg, n, mode)
    config = {"kind": "aux", "objective": objective, "model_hash": model_result["model_hash"],
              "task": task_dict(task), "train": train_dict(aux_cfg or cfg), "N": n, "mode": DecodeMode(mode).value}
    return Path(root) / "aux" / f"{objective}_n{n}_{config['mode']}_{run_key(config)}"


# -- toy model ----------------------------------------------------------------------------------

def ensure_toy(root: Path, seed: int, task: TaskConfig | None = None, hidden_size: int = 64,
               steps: int = 10_000) -> dict:
    task = task or desk_configs()[0]
    cfg = TrainConfig(max_steps=steps, seed=seed, hidden_sizes=(hidden_size,))
    config = {"kind": "toy", "task": task_dict(task), "train": train_dict(cfg), "N": hidden_size}
    out = Path(root) / "toy" / f"seed{seed}_{run_key(config)}"
    if (out / "result.json").exists():
        return read_json(out / "result.json")
    train, test = corpora(task)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", _provenance(config, {"train_corpus": corpus_hash(train),
                                                          "test_corpus": corpus_hash(test)}))
    p, records = toy_train(cfg, task, hidden_size, (train, test))
    save_aux(out / "params.aux", "toy", p.arrays(), {"gamma": p.gamma, "N": hidden_size, "N_S": task.n_symbols,
                                                      "L_max": task.l_max, "seed": seed})
    write_atomic(out / "metrics.jsonl", metrics_lines(records).encode())
    from .trainer import first_step_reaching

    result = {"seed": seed, "accuracy": records[-1].eval_accuracy, "first_step_0.99": first_step_reaching(records)}
    write_json(out / "result.json", result)
    return result


def result_kind(result: dict) -> str:
    """Classify a stored result by its fields: model, aux, gates or toy."""
    if "objective" in result:
        return "aux"
    if "monotone_fraction" in result:
        return "gates"
    if "exact_match" in result:
        return "model"
    if "seed" in result and "accuracy" in result:
        return "toy"
    return "other"


def collect_results(root: Path) -> list[dict]:
    """Every stored result below ``root``, tagged with its run path and kind, in sorted order."""
    root = Path(root)
    rows = []
    for path in sorted(root.rglob("result.json"), key=lambda q: q.relative_to(root).as_posix()):
        result = read_json(path)
        rows.append({"run": path.parent.relative_to(root).as_posix(), "kind": result_kind(result), **result})
    return rows


__all__ = ["ACCEPTANCE_FEEDBACK", "collect_results", "corpora", "desk_configs", "ensure_aux", "ensure_model",
           "ensure_toy", "model_dir", "aux_dir", "run_key", "source_hash", "version_string"]

"""Command line: data generation, training, interventions, probes, gate export, toy model, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .auxiliary import OBJECTIVES, check_compatible, eval_counterfactuals, eval_edits, save_aux, train_auxiliary
from .errors import ConfigMismatch, MissingArtifact, error_record, exit_code, EXIT_USAGE
from .experiments import _provenance, corpus_hash, read_json, version_string, write_json
from .gru import DecodeMode, encode, exact_match, gate_traces
from .heatmap import export_gate_heatmap, monotone_fraction
from .probes import PROBE_KINDS
from .report import write_report
from .taskgen import TaskConfig, build_corpus, config_dict as task_dict, write_corpus, write_records
from .toymodel import toy_train
from .trainer import PROFILES, TrainConfig, config_dict as train_dict, first_step_reaching, load_checkpoint, metrics_lines, params_hash, train_model

log = logging.getLogger("onionlab")

EPILOG = """\
exit codes:
  0  success
  1  unexpected failure
  2  usage error (bad flags or config file)
  3  missing checkpoint or auxiliary file
  4  checkpoint does not match the task/objective configuration
  5  numeric failure (NaN/Inf) during training or evaluation
  6  train/test generation exhausted the sequence space
  7  corrupted checkpoint/auxiliary file
On failure a JSON error record is printed to stderr (and written to <out>/error.json when --out is given).

config file: JSON object with optional "task" and "train" sections whose keys are
the TaskConfig / TrainConfig field names; command-line flags override it.
"""


class UsageError(ValueError):
    pass


# -- configuration ----------------------------------------------------------------------

def resolve_configs(args) -> tuple[TaskConfig, TrainConfig]:
    task, cfg = PROFILES[args.profile]
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifact(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise UsageError(f"config file {path}: {err}") from None
        unknown = set(raw) - {"task", "train"}
        if unknown:
            raise UsageError(f"config file {path}: unknown sections {sorted(unknown)}")
        try:
            task = replace(task, **raw.get("task", {}))
            cfg = replace(cfg, **raw.get("train", {}))
        except TypeError as err:
            raise UsageError(f"config file {path}: {err}") from None
    overrides = {k: getattr(args, k) for k in ("seed", "feedback", "batch_size", "lr", "weight_decay", "eval_every")
                 if getattr(args, k, None) is not None}
    if getattr(args, "steps", None) is not None:
        overrides["max_steps"] = args.steps
    cfg = replace(cfg, **overrides)
    if getattr(args, "data_seed", None) is not None:
        task = replace(task, seed=args.data_seed)
    if getattr(args, "train_size", None) is not None:
        task = replace(task, train_size=args.train_size)
    if getattr(args, "test_size", None) is not None:
        task = replace(task, test_size=args.test_size)
    return task, cfg


def load_model(path: str, task: TaskConfig, mode: str | None):
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"checkpoint not found: {p}")
    params, meta = load_checkpoint(p)
    check_compatible(params, task)
    if "L_max" in meta and int(meta["L_max"]) != task.l_max:
        raise ConfigMismatch(f"checkpoint has L_max={meta['L_max']}, task expects {task.l_max}")
    ckpt_mode = meta.get("mode")
    if mode is not None and ckpt_mode is not None and mode != ckpt_mode:
        raise ConfigMismatch(f"checkpoint was trained with mode={ckpt_mode}, --mode {mode} requested")
    return params, meta, DecodeMode(mode or ckpt_mode or "ar")


def out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_config(out: Path, args, task: TaskConfig, cfg: TrainConfig, inputs: dict[str, str], **extra) -> None:
    config = {"command": args.command, "task": task_dict(task), "train": train_dict(cfg), **extra}
    write_json(out / "config.json", _provenance(config, inputs))


# -- subcommands -------------------------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    task, cfg = resolve_configs(args)
    out = out_dir(args)
    train, test = build_corpus(task)
    write_corpus(out / "train.bin", train)
    write_corpus(out / "test.bin", test)
    write_records(out / "unigram_eval.jsonl", eval_counterfactuals("unigram", cfg, task, test))
    if task.l_max >= 2 and task.n_symbols >= 2:
        write_records(out / "bigram_eval.jsonl", eval_counterfactuals("bigram", cfg, task, test))
    if task.n_symbols >= 2:
        write_records(out / "onion_eval.jsonl", eval_edits(cfg, task, test))
    write_run_config(out, args, task, cfg, {})
    return {"train": len(train), "test": len(test), "train_hash": corpus_hash(train), "test_hash": corpus_hash(test)}


def cmd_train(args) -> dict:
    task, cfg = resolve_configs(args)
    out = out_dir(args)
    train, test = build_corpus(task)
    write_run_config(out, args, task, cfg, {"train_corpus": corpus_hash(train), "test_corpus": corpus_hash(test)},
                     N=args.n, mode=args.mode)
    params, records = train_model(cfg, task, args.n, args.mode, out_dir=out, corpora=(train, test))
    acc = records[-1].eval_accuracy if records else exact_match(params, test, args.mode)
    return {"N": args.n, "mode": args.mode, "feedback": cfg.feedback, "steps": cfg.max_steps, "exact_match": acc,
            "first_step_0.99": first_step_reaching(records), "model_hash": params_hash(params)}


def cmd_eval(args) -> dict:
    task, cfg = resolve_configs(args)
    params, meta, mode = load_model(args.model, task, args.mode)
    _, test = build_corpus(task)
    return {"model": args.model, "mode": mode.value, "exact_match": exact_match(params, test, mode)}


def _aux(args, objective: str) -> dict:
    task, cfg = resolve_configs(args)
    out = out_dir(args)
    params, meta, mode = load_model(args.model, task, args.mode)
    train, test = build_corpus(task)
    write_run_config(out, args, task, cfg, {"model": params_hash(params), "train_corpus": corpus_hash(train),
                                            "test_corpus": corpus_hash(test)}, objective=objective)
    res = train_auxiliary(objective, params, mode, cfg, task, train, test)
    save_aux(out / "params.aux", objective, res.arrays, res.meta)
    (out / "metrics.jsonl").write_text(metrics_lines(res.records))
    return {"objective": objective, "N": params.hidden_size, "mode": mode.value, **res.metrics}


def cmd_intervene(args) -> dict:
    if args.kind == "onion":
        objective = "onion-control" if args.control else "onion"
    else:
        if args.control:
            raise UsageError("--control only applies to the onion intervention")
        objective = f"das-{args.kind}"
    return _aux(args, objective)


def cmd_probe(args) -> dict:
    return _aux(args, f"probe-{args.kind}")


def cmd_gates(args) -> dict:
    task, cfg = resolve_configs(args)
    params, meta, mode = load_model(args.model, task, args.mode)
    out = out_dir(args)
    if args.input:
        try:
            tokens = tuple(int(t) for t in args.input.replace(",", " ").split())
        except ValueError:
            raise UsageError(f"--input must be whitespace-separated token ids, got {args.input!r}") from None
        if not tokens or any(not 0 <= t < task.n_symbols for t in tokens) or len(tokens) > task.l_max:
            raise UsageError(f"--input needs 1..{task.l_max} ids in [0, {task.n_symbols})")
        _, trace = encode(params, tokens)
        csv_path, ppm_path = export_gate_heatmap(trace.gates, out / "gates")
        return {"csv": str(csv_path), "ppm": str(ppm_path), "shape": list(trace.shape)}
    _, test = build_corpus(task)
    sub = test.subset(np.arange(min(args.sequences, len(test))))
    traces = gate_traces(params, sub)
    frac = monotone_fraction(traces, sub.lengths)
    # mean trace over the longest test sequences
    longest = traces[sub.lengths == sub.lengths.max()]
    export_gate_heatmap(longest.mean(axis=0).T, out / "gates_mean")
    result = {"monotone_fraction": frac, "sequences": len(sub), "model_hash": params_hash(params)}
    write_json(out / "result.json", result)
    return result


def cmd_toy(args) -> dict:
    task, cfg = resolve_configs(args)
    if args.steps is None:
        cfg = replace(cfg, max_steps=10_000)
    out = out_dir(args)
    train, test = build_corpus(task)
    write_run_config(out, args, task, cfg, {"train_corpus": corpus_hash(train), "test_corpus": corpus_hash(test)},
                     N=args.n)
    p, records = toy_train(cfg, task, args.n, (train, test))
    save_aux(out / "params.aux", "toy", p.arrays(), {"gamma": p.gamma, "N": args.n, "N_S": task.n_symbols,
                                                      "L_max": task.l_max, "seed": cfg.seed})
    (out / "metrics.jsonl").write_text(metrics_lines(records))
    return {"seed": cfg.seed, "accuracy": records[-1].eval_accuracy if records else None,
            "first_step_0.99": first_step_reaching(records)}


def cmd_report(args) -> dict:
    root = Path(args.root)
    if not root.is_dir():
        raise MissingArtifact(f"artifact root not found: {root}")
    tables, text = write_report(root, args.out)
    sys.stdout.write(tables.read_text())
    return {"tables": str(tables), "summary": str(text)}


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onionlab", description=__doc__, epilog=EPILOG,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True, model=False):
        p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
        p.add_argument("--config", help="JSON config file (flags override)")
        p.add_argument("--seed", type=int, help="training seed")
        p.add_argument("--data-seed", type=int, help="corpus seed")
        p.add_argument("--train-size", type=int)
        p.add_argument("--test-size", type=int)
        p.add_argument("--steps", type=int, help="optimizer steps")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--eval-every", type=int)
        p.add_argument("--out", required=out_required, help="artifact directory")
        if model:
            p.add_argument("--model", required=True, help="base model checkpoint")
            p.add_argument("--mode", choices=[m.value for m in DecodeMode], help="decode mode (default: from checkpoint)")

    p = sub.add_parser("gen-data", help="write train/test corpora and held-out intervention sets",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a base GRU", epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--n", type=int, required=True, help="hidden size")
    p.add_argument("--mode", choices=[m.value for m in DecodeMode], default="ar")
    p.add_argument("--feedback", choices=["self", "teacher"], help="decode-phase input during training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p, out_required=False, model=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("intervene", help="train and evaluate an intervention", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("kind", choices=["unigram", "bigram", "onion"])
    p.add_argument("--control", action="store_true", help="onion only: pin gamma and beta to 1")
    common(p, model=True)
    p.set_defaults(func=cmd_intervene)

    p = sub.add_parser("probe", help="train and evaluate a probe", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("kind", choices=list(PROBE_KINDS))
    common(p, model=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gates", help="export update-gate traces", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p, model=True)
    p.add_argument("--input", help='token ids, e.g. "3 17 4 0 9"; omit for test-set statistics')
    p.add_argument("--sequences", type=int, default=100, help="test sequences for the statistic")
    p.set_defaults(func=cmd_gates)

    p = sub.add_parser("toy", help="train the fixed-scale onion toy model", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--n", type=int, default=64, help="memory width")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("report", help="tables from stored results", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--root", required=True, help="artifact tree to scan")
    p.add_argument("--out", help="output directory (default <root>/report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        result = args.func(args)
    except Exception as err:  # noqa: BLE001 - every failure becomes a structured record
        record = error_record(err)
        if isinstance(err, UsageError):
            record["exit_code"] = EXIT_USAGE
        if getattr(args, "out", None) and args.command != "report":
            try:
                write_json(Path(args.out) / "error.json", record)
            except OSError:
                pass
        sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
        if args.verbose:
            log.exception("command failed")
        return record["exit_code"]
    result = {"command": args.command, "version": version_string(), **result}
    if getattr(args, "out", None) and args.command not in ("gates", "report"):
        write_json(Path(args.out) / "result.json", {k: v for k, v in result.items() if k != "version"})
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

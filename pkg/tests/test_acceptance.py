"""Acceptance suite on the desk profile.

Runs are cached under ``runs/`` at the repository root (keyed by config and
source hash), so the first session trains everything and later sessions only
evaluate. Each test records a PASS/FAIL line that is printed in the terminal
summary.
"""
import time
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import NOTES, VERDICTS
from test_core import PRIMITIVES, rand
from onionlab.auxiliary import load_aux, onion_from_aux, probe_from_aux
from onionlab.core import Tensor
from onionlab.core.autodiff import sum as ad_sum
from onionlab.core.gradcheck import max_relative_error
from onionlab.core.rng import make_rng
from onionlab.experiments import (ACCEPTANCE_FEEDBACK, aux_dir, corpora, desk_configs, ensure_aux, ensure_model,
                                  ensure_toy, model_dir, read_json, write_json)
from onionlab.gru import DecodeMode, Feedback, GruParams, Net, batch_loss, boundary_states, gate_traces
from onionlab.heatmap import export_gate_heatmap, monotone_fraction
from onionlab.interventions.das import DasParams, das_loss, subspace_replace, variable_selector
from onionlab.interventions.onion import OnionParams, onion_intervene, onion_loss
from onionlab.probes import PROBE_KINDS, featurize, init_probe, onion_interchange, probe_loss, probe_predict, reconstruction_error
from onionlab.taskgen import OnionEditExample, TaskConfig
from onionlab.toymodel import toy_loss, ToyParams
from onionlab.trainer import params_hash, train_model

ROOT = Path(__file__).resolve().parents[1] / "runs"
TASK, CFG = desk_configs(ACCEPTANCE_FEEDBACK)
AR, NI = "ar", "noinput"


def verdict(number: int, name: str, ok: bool, detail: str) -> None:
    VERDICTS[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(VERDICTS[number])
    assert ok, VERDICTS[number]


def aux(objective, n, mode):
    return ensure_aux(ROOT, objective, TASK, CFG, n, mode)


# -- 1 ----------------------------------------------------------------------------------------

def _gradcheck_suite() -> dict[str, float]:
    errs = {}
    for name, (fn, shapes) in PRIMITIVES.items():
        prng = np.random.default_rng(zlib.crc32(name.encode()))
        errs[name] = max_relative_error(fn, {k: rand(prng, *s) for k, s in shapes.items()})
    rng = make_rng(0, "acceptance-gradcheck")
    model = GruParams.init(5, 4, rng, np.float64)
    h0 = rng.uniform(-1, 1, (2, 5))

    def step_fn(P):
        net = Net(P)
        h, _ = net.step(Tensor(h0), net.project(np.array([2, 4])))
        return ad_sum(h * h)

    errs["gru-step"] = max_relative_error(step_fn, model.arrays())
    tokens = np.array([[0, 3, 1, 2], [2, 2, 0, 0]])
    lengths = np.array([4, 2])
    for mode in (DecodeMode.AUTOREGRESSIVE, DecodeMode.NO_INPUT):
        for fb in (Feedback.TEACHER_FORCED, Feedback.SELF_FED):
            errs[f"gru-{mode.value}-{fb.value}"] = max_relative_error(
                lambda P: batch_loss(P, tokens, lengths, mode, fb), model.arrays())
    h = rng.uniform(-1, 1, (2, 5))
    task = TaskConfig(n_symbols=4, l_max=4)
    for kind in PROBE_KINDS:
        p = init_probe(kind, 5, task, rng, np.float64)
        errs[f"probe-{kind}"] = max_relative_error(lambda P: probe_loss(P, kind, h, tokens, lengths, 4, 4), p.arrays)
    net = Net.frozen(model)
    op = OnionParams.init(4, 5, rng, dtype=np.float64)
    op.beta[:] = 0.1
    packed = {"j": np.array([1, 2]), "old": np.array([0, 2]), "new": np.array([2, 3]),
              "target": np.array([[2, 3, 1, 2], [2, 3, 0, 0]]), "lengths": lengths}
    errs["onion"] = max_relative_error(lambda P: onion_loss(P, net, h, packed, DecodeMode.AUTOREGRESSIVE), op.arrays())
    hs = rng.uniform(-1, 1, (2, 5))
    sel = variable_selector([(1,), (2, 3)], 4, np.float64)
    fixed = {"assign_logits": rng.normal(0, 1, (5, 5))}

    def das_fn(P):
        return das_loss({**P, "assign_logits": Tensor(fixed["assign_logits"])}, net, h, hs, sel, tokens, lengths,
                        DecodeMode.AUTOREGRESSIVE, make_rng(5), 1.0)

    errs["das-rotation"] = max_relative_error(das_fn, {"skew": rng.normal(0, 0.5, (5, 5))})
    toy = ToyParams.init(4, 5, rng, np.float64)
    errs["toy"] = max_relative_error(lambda P: toy_loss(P, tokens, lengths, 0.4), toy.arrays())
    return errs


def test_c01_gradchecks():
    start = time.perf_counter()
    errs = _gradcheck_suite()
    elapsed = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and elapsed < 60
    verdict(1, "f64 finite-difference gradchecks", ok,
            f"{len(errs)} checks, worst {worst} rel err {errs[worst]:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


# -- 2 ----------------------------------------------------------------------------------------

def test_c02_base_model_accuracy():
    results, hours = {}, {}
    for n in (64, 128):
        _, res = ensure_model(ROOT, TASK, CFG, n, AR)
        results[n] = res["exact_match"]
        timing = model_dir(ROOT, TASK, CFG, n, AR) / "timing.json"
        hours[n] = read_json(timing)["wall_time_s"] / 3600 if timing.exists() else float("nan")
    ok = results[64] >= 0.90 and results[128] >= 0.98 and all(h <= 2 for h in hours.values())
    verdict(2, "AR exact match", ok, f"N=64 {results[64]:.4f} (>= 0.90), N=128 {results[128]:.4f} (>= 0.98), "
            f"train time {hours[64]:.2f}h / {hours[128]:.2f}h (<= 2h)")


# -- 3-5 --------------------------------------------------------------------------------------

def test_c03_unigram_das_fails_on_n64_ar():
    acc = aux("das-unigram", 64, AR)["accuracy"]
    verdict(3, "unigram DAS on N=64 AR", acc <= 0.10, f"{acc:.4f} (<= 0.10)")


def test_c04_unigram_das_succeeds_on_n128_noinput():
    acc = aux("das-unigram", 128, NI)["accuracy"]
    verdict(4, "unigram DAS on N=128 no-input", acc >= 0.90, f"{acc:.4f} (>= 0.90)")


def test_c05_bigram_das():
    bi128 = aux("das-bigram", 128, AR)["accuracy"]
    uni128 = aux("das-unigram", 128, AR)["accuracy"]
    bi64 = aux("das-bigram", 64, AR)["accuracy"]
    ok = bi128 - uni128 >= 0.3 and bi64 <= 0.10
    verdict(5, "bigram DAS", ok, f"N=128 AR bigram {bi128:.4f} - unigram {uni128:.4f} = {bi128 - uni128:.4f} (>= 0.3), "
            f"N=64 AR bigram {bi64:.4f} (<= 0.10)")


# -- 6-7 --------------------------------------------------------------------------------------

def test_c06_onion_intervention():
    onion = aux("onion", 64, AR)
    control = aux("onion-control", 64, AR)["accuracy"]
    ok = onion["accuracy"] >= 0.75 and control <= 0.40
    verdict(6, "onion intervention on N=64 AR", ok, f"onion {onion['accuracy']:.4f} (>= 0.75), control "
            f"{control:.4f} (<= 0.40), negative gamma: {onion['gamma_negative']}")


def test_c07_probes():
    acc = {k: aux(f"probe-{k}", 64, AR)["sequence"] for k in ("onion", "linear", "gru-ar", "gru-noinput")}
    ok = (acc["onion"] >= 0.90 and acc["linear"] <= 0.10 and acc["gru-ar"] >= 0.90 and acc["gru-noinput"] <= 0.50
          and acc["onion"] - acc["linear"] > 0.5)
    verdict(7, "probes on N=64 AR", ok, f"onion {acc['onion']:.4f} (>= 0.90), linear {acc['linear']:.4f} (<= 0.10), "
            f"gru-ar {acc['gru-ar']:.4f} (>= 0.90), gru-noinput {acc['gru-noinput']:.4f} (<= 0.50), "
            f"onion-linear {acc['onion'] - acc['linear']:.4f} (> 0.5)")


# -- 8 ----------------------------------------------------------------------------------------

def test_c08_gate_monotonicity():
    model, res = ensure_model(ROOT, TASK, CFG, 64, AR)
    _, test = corpora(TASK)
    sub = test.subset(np.arange(100))
    traces = gate_traces(model, sub)
    frac = monotone_fraction(traces, sub.lengths)
    out = ROOT / "gates" / f"n64_ar_{res['model_hash'][:16]}"
    out.mkdir(parents=True, exist_ok=True)
    longest = traces[sub.lengths == sub.lengths.max()]
    export_gate_heatmap(longest.mean(axis=0).T, out / "gates_mean")
    write_json(out / "result.json", {"monotone_fraction": frac, "sequences": len(sub), "model_hash": res["model_hash"]})
    verdict(8, "update-gate mean non-increasing during input", frac >= 0.90, f"{frac:.4f} of adjacent steps (>= 0.90)")


# -- 9 ----------------------------------------------------------------------------------------

def _trained_onion():
    aux("onion", 64, AR)
    aux("probe-onion", 64, AR)
    _, op_arrays, _ = load_aux(aux_dir(ROOT, "onion", TASK, CFG, 64, AR) / "params.aux")
    _, pr_arrays, pr_meta = load_aux(aux_dir(ROOT, "probe-onion", TASK, CFG, 64, AR) / "params.aux")
    return onion_from_aux(op_arrays), probe_from_aux(pr_arrays, pr_meta)


def _correct_states(n_states: int):
    model, _ = ensure_model(ROOT, TASK, CFG, 64, AR)
    op, probe = _trained_onion()
    _, test = corpora(TASK)
    h = boundary_states(model, test.tokens, test.lengths)
    preds = probe_predict(probe, h, test.lengths)
    width = preds.shape[1]
    mask = np.arange(width)[None, :] < test.lengths[:, None]
    correct = np.flatnonzero(((preds == test.tokens[:, :width]) | ~mask).all(axis=1))
    return op, probe, h, test, correct[:n_states]


def test_c09_dual_route_interchange():
    op, probe, h, test, idx = _correct_states(1000)
    rng = make_rng(0, "dual-route")
    worst = 0.0
    for i in idx:
        length = int(test.lengths[i])
        a = tuple(int(t) for t in test.tokens[i, :length])
        j = int(rng.integers(1, length + 1))
        b = list(a)
        b[j - 1] = int(rng.integers(TASK.n_symbols))
        route_f = onion_interchange(op, probe, h[i], b, j, length)
        route_d = onion_intervene(op, h[i], OnionEditExample(a, j, a[j - 1], b[j - 1]))
        worst = max(worst, float(np.abs(route_f.astype(np.float32) - route_d.astype(np.float32)).max()))
    ok = len(idx) == 1000 and worst <= 1e-4
    verdict(9, "dual-route onion interchange", ok, f"{len(idx)} correctly probed states (need 1000), "
            f"max |diff| {worst:.2e} (<= 1e-4)")


def test_featurizer_reconstruction_error():
    op, probe, h, test, idx = _correct_states(1000)
    errs = {v: [reconstruction_error(h[i], featurize(h[i], probe, op, int(test.lengths[i]), v)) for i in idx]
            for v in ("consistent", "literal")}
    median = {v: float(np.median(e)) for v, e in errs.items()}
    NOTES.append(f"featurizer median relative reconstruction error over {len(idx)} correctly probed states: "
                 f"consistent {median['consistent']:.2e} (< 0.05), literal {median['literal']:.4f}")
    assert median["consistent"] < 0.05


# -- 10 ---------------------------------------------------------------------------------------

def test_c10_toy_model():
    results = [ensure_toy(ROOT, seed, TASK) for seed in range(5)]
    steps = [r["first_step_0.99"] for r in results]
    ok = all(s is not None and s <= 10_000 for s in steps)
    verdict(10, "toy onion model", ok, f"first step reaching 0.99 per seed {steps} (all <= 10000), "
            f"final {[round(r['accuracy'], 4) for r in results]}")


# -- 11 ---------------------------------------------------------------------------------------

def test_c11_intervention_algebra():
    failures = []
    for seed in range(100):
        rng = make_rng(seed, "acceptance-algebra")
        das = DasParams.init(64, TASK.l_max, "unigram", rng)
        das.skew = rng.normal(0, 1, (64, 64)).astype(np.float32)
        das.assign_logits = rng.normal(0, 1, das.assign_logits.shape).astype(np.float32)
        hb, hs = rng.uniform(-1, 1, (2, 64)).astype(np.float32)
        R = das.rotation()
        if np.abs(R @ R.T - np.eye(64)).max() > 1e-5:
            failures.append((seed, "orthogonality"))
        if subspace_replace(das, hb, hs, ()).tobytes() != hb.tobytes():
            failures.append((seed, "empty mask"))
        full = das.assign_logits.copy()
        das.assign_logits[:] = -5.0
        das.assign_logits[:, 1] = 5.0
        if np.abs(subspace_replace(das, hb, hs, (1,)) - hs).max() >= 1e-5:
            failures.append((seed, "full mask"))
        das.assign_logits = full
        op = OnionParams.init(TASK.n_symbols, 64, rng)
        op.g[:] = rng.normal(size=64)
        op.gamma[:] = rng.normal(size=64)
        tok = int(rng.integers(TASK.n_symbols))
        if onion_intervene(op, hb, OnionEditExample((tok, tok), 2, tok, tok)).tobytes() != hb.tobytes():
            failures.append((seed, "onion same token"))
    verdict(11, "intervention algebra over 100 seeds", not failures,
            f"{400 - len(failures)}/400 checks hold" + (f", failures {failures[:5]}" if failures else ""))


# -- 12 ---------------------------------------------------------------------------------------

def test_c12_determinism(tmp_path):
    cfg = replace(CFG, max_steps=200, eval_every=100)
    hashes = []
    for name in ("a", "b"):
        params, _ = train_model(cfg, TASK, 64, AR, out_dir=tmp_path / name, corpora=corpora(TASK))
        hashes.append(params_hash(params))
    same_metrics = (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    ok = same_metrics and hashes[0] == hashes[1]
    verdict(12, "same seed, byte-identical metrics", ok,
            f"metrics.jsonl identical: {same_metrics}, parameter hashes identical: {hashes[0] == hashes[1]}")

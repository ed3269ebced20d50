"""Summary tables rebuilt purely from stored ``result.json`` files.

Nothing is recomputed, so the output is byte-identical for an unchanged
artifact tree.
"""
from __future__ import annotations

from pathlib import Path

from .experiments import collect_results

INTERVENTIONS = ("das-unigram", "das-bigram", "onion", "onion-control")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _table(title: str, header: list[str], rows: list[list]) -> str:
    lines = [f"# {title}", "\t".join(header)]
    lines += ["\t".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def build_tables(rows: list[dict]) -> str:
    models = sorted((r for r in rows if r["kind"] == "model"), key=lambda r: (r["mode"], r["N"], r["run"]))
    aux = sorted((r for r in rows if r["kind"] == "aux"), key=lambda r: r["run"])
    toys = sorted((r for r in rows if r["kind"] == "toy"), key=lambda r: (r["seed"], r["run"]))
    gates = [r for r in rows if r["kind"] == "gates"]

    out = [_table("base models: exact-match accuracy", ["N", "mode", "feedback", "steps", "exact_match"],
                  [[m["N"], m["mode"], m.get("feedback"), m.get("steps"), m["exact_match"]] for m in models])]

    for mode, title in (("ar", "interventions on autoregressive models"), ("noinput", "interventions on no-input models")):
        grid: dict[int, dict[str, float]] = {}
        for r in aux:
            if r["mode"] == mode and r["objective"] in INTERVENTIONS:
                grid.setdefault(r["N"], {})[r["objective"]] = r["accuracy"]
        out.append(_table(title, ["N", *INTERVENTIONS],
                          [[n, *(grid[n].get(o) for o in INTERVENTIONS)] for n in sorted(grid)]))

    probes = sorted((r for r in aux if r["objective"].startswith("probe-")), key=lambda r: (r["mode"], r["N"], r["objective"]))
    out.append(_table("probes on the final encoder state", ["N", "mode", "probe", "sequence_acc", "token_acc"],
                      [[r["N"], r["mode"], r["objective"][6:], r.get("sequence"), r.get("token")] for r in probes]))
    out.append(_table("gate monotonicity (channel-mean update gate, input phase)",
                      ["run", "monotone_fraction", "sequences"],
                      [[g["run"], g["monotone_fraction"], g["sequences"]] for g in gates]))
    out.append(_table("toy onion model", ["seed", "accuracy", "first_step_0.99"],
                      [[t["seed"], t["accuracy"], t.get("first_step_0.99")] for t in toys]))
    flagged = [r["run"] for r in aux if r.get("gamma_negative")]
    out.append(_table("flags", ["run", "note"], [[f, "negative gamma in onion scale law"] for f in flagged]))
    return "\n".join(out)


def summary(rows: list[dict]) -> str:
    counts = {}
    for r in rows:
        counts[r["kind"]] = counts.get(r["kind"], 0) + 1
    parts = ", ".join(f"{k}: {counts[k]}" for k in sorted(counts))
    return f"{len(rows)} stored results ({parts})\n"


def write_report(root: str | Path, out_dir: str | Path | None = None) -> tuple[Path, Path]:
    from .container import write_atomic

    rows = collect_results(Path(root))
    out = Path(out_dir) if out_dir is not None else Path(root) / "report"
    tables, text = out / "tables.tsv", out / "summary.txt"
    write_atomic(tables, build_tables(rows).encode())
    write_atomic(text, summary(rows).encode())
    return tables, text

"""Cross-run aggregation: per-method mean/std over seeds and paired deltas."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from .runs import read_csv, summarize, write_csv

SEVERITY_COLUMNS = tuple(f"Sev.{s}" for s in range(1, 6))
BASE_COLUMNS = ("ID", *SEVERITY_COLUMNS, "OOD", "sECE")


def run_columns(run_dir) -> dict:
    """Benchmark columns of one finished run, recomputed from its metrics.csv."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    rows = read_csv(run_dir / "metrics.csv")
    protocol = "standard" if manifest["method"] == "standard" else "single"
    s = summarize(rows, protocol)
    cols = {"ID": s.get("id_accuracy"), "OOD": s.get("ood_accuracy"), "sECE": s.get("smoothed_ece_ood")}
    for sev in range(1, 6):
        cols[f"Sev.{sev}"] = s.get(f"sev{sev}_accuracy")
    for k, v in s.items():
        if k.startswith("auroc_"):
            cols["AUROC." + k[len("auroc_"):]] = v
    return {"run_dir": str(run_dir), "method": manifest["method"],
            "seed": manifest["config"]["seeds"]["init"], "dataset": manifest["config"]["dataset"],
            "columns": cols}


def _stats(values) -> dict:
    v = np.array([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "std": None, "n": 0}
    # sample standard deviation over seeds; a single seed reports 0
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return {"mean": float(np.mean(v)), "std": std, "n": int(v.size)}


def _column_names(runs) -> list[str]:
    extra = sorted({c for r in runs for c in r["columns"] if c not in BASE_COLUMNS})
    return [*BASE_COLUMNS, *extra]


def delta_table(candidate: list[dict], baseline: list[dict]) -> dict:
    """Per-column mean/std of candidate minus baseline, paired by seed."""
    base_by_seed = {r["seed"]: r for r in baseline}
    pairs = [(r, base_by_seed[r["seed"]]) for r in candidate if r["seed"] in base_by_seed]
    if not pairs:
        raise ValidationError("no seed is shared between the two groups")
    out = {}
    for col in _column_names([p for pair in pairs for p in pair]):
        diffs = []
        for c, b in pairs:
            x, y = c["columns"].get(col), b["columns"].get(col)
            if x is not None and y is not None:
                diffs.append(x - y)
        out[col] = _stats(diffs)
    return out


def report(run_dirs, out_dir=None, comparisons=(("proposed", "standard"), ("vanilla", "standard"))) -> dict:
    """Aggregate finished runs; writes report.json and deltas.csv into ``out_dir``."""
    runs = [run_columns(d) for d in run_dirs]
    if not runs:
        raise ValidationError("no runs to report")
    datasets = {json.dumps(r["dataset"], sort_keys=True) for r in runs}
    if len(datasets) > 1:
        raise ValidationError("runs were trained on different datasets and cannot be compared")
    columns = _column_names(runs)
    by_method: dict[str, list] = {}
    for r in runs:
        by_method.setdefault(r["method"], []).append(r)
    methods = {m: {c: _stats(r["columns"].get(c) for r in rs) for c in columns}
               for m, rs in sorted(by_method.items())}
    deltas = {}
    for cand, base in comparisons:
        if cand in by_method and base in by_method:
            deltas[f"{cand}-{base}"] = delta_table(by_method[cand], by_method[base])
    result = {"columns": columns, "methods": methods, "deltas": deltas,
              "runs": [{k: r[k] for k in ("run_dir", "method", "seed", "columns")} for r in runs]}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(result, indent=2, sort_keys=True), encoding="utf-8")
        rows = []
        for name, table in [*((f"{m}", t) for m, t in methods.items()), *deltas.items()]:
            for stat in ("mean", "std"):
                rows.append({"group": name, "statistic": stat, **{c: table[c][stat] for c in columns}})
        write_csv(out / "deltas.csv", ("group", "statistic", *columns), rows)
    return result

"""Multi-run sweeps. Each run lives in its own directory named after its config digest,
so overlapping sweeps reuse finished runs instead of retraining them."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from ..errors import ValidationError
from .config import RunConfig, check
from .runs import evaluate_run, train_run, write_csv

log = logging.getLogger(__name__)

REFSET_LADDER = (5, 50, 500, 5000, None)
ALPHA_LADDER = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)
NOISE_LADDER = (0.005, 0.01, 0.02, 0.05, 0.10, 0.15, 0.20)
SUMMARY_KEYS = ("id_accuracy", "ood_accuracy", "sev345_accuracy", "smoothed_ece_ood")


def method_config(cfg: RunConfig, method: str, alpha: float | None = None) -> RunConfig:
    """``cfg`` switched to standard, vanilla (alpha 0) or proposed anchoring."""
    if method == "standard":
        # anchored inference protocols have no meaning without references
        return cfg.replace(anchoring={"enabled": False}, evaluation={"protocols": ["single"]})
    if method == "vanilla":
        return cfg.replace(anchoring={"enabled": True, "alpha": 0.0})
    if method == "proposed":
        a = alpha if alpha is not None else (cfg.anchoring.alpha or 0.25)
        if a <= 0:
            raise ValidationError("proposed mode needs alpha > 0")
        return cfg.replace(anchoring={"enabled": True, "alpha": a})
    raise ValidationError(f"unknown method {method!r}")


def run_dir_for(root, cfg: RunConfig) -> Path:
    return Path(root) / f"{cfg.method}-{cfg.digest()}"


def _is_complete(run_dir: Path, cfg: RunConfig) -> bool:
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return False
    return manifest.get("config_digest") == cfg.digest() and (run_dir / "metrics.json").exists()


def execute(cfg_json: str, root: str) -> dict:
    """Train and evaluate one run (or reuse a finished one); returns its summary."""
    cfg = RunConfig.from_json(cfg_json)
    run_dir = run_dir_for(root, cfg)
    if not _is_complete(run_dir, cfg):
        train_run(cfg, run_dir)
        evaluate_run(run_dir)
    summary = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))["summary"]
    return {"run_dir": str(run_dir), **summary}


def run_many(configs: list[RunConfig], root, threads: int = 1) -> list[dict]:
    """One process per run when ``threads > 1``; results come back in input order."""
    for c in configs:
        check(c)
    Path(root).mkdir(parents=True, exist_ok=True)
    jobs = [(c.to_json(), str(root)) for c in configs]
    if threads <= 1 or len(jobs) <= 1:
        return [execute(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(execute, *j) for j in jobs]
        return [f.result() for f in futures]


def _rows(variants, results):
    rows = []
    for (fields, cfg), res in zip(variants, results):
        rows.append({**fields, "method": cfg.method, "seed": cfg.seeds.init,
                     **{k: res.get(k) for k in SUMMARY_KEYS}, "run_dir": res["run_dir"]})
    return rows


def sweep_refset(cfg: RunConfig, sizes=REFSET_LADDER, root="sweep-refset", threads: int = 1,
                 alpha: float | None = None) -> list[dict]:
    """Proposed and vanilla runs with matched seeds for each reference-set size (None = all)."""
    n = cfg.dataset.n_train
    for s in sizes:
        if s is not None and not 1 <= s <= n:
            raise ValidationError(f"reference-set size {s} outside [1, {n}]")
    variants = []
    for s in sizes:
        for method in ("proposed", "vanilla"):
            c = method_config(cfg, method, alpha).replace(anchoring={"refset_size": s})
            variants.append(({"size": "all" if s is None else s}, c))
    rows = _rows(variants, run_many([c for _, c in variants], root, threads))
    write_csv(Path(root) / "sweep_refset.csv", ("size", "method", "seed", *SUMMARY_KEYS, "run_dir"), rows)
    return rows


def sweep_alpha(cfg: RunConfig, alphas=ALPHA_LADDER, root="sweep-alpha", threads: int = 1,
                modes=("replace", "augment")) -> list[dict]:
    """ID and OOD accuracy for each alpha under each masking mode."""
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValidationError(f"alpha {a} outside [0, 1]")
    variants = [({"mode": m, "alpha": a}, cfg.replace(anchoring={"enabled": True, "alpha": a, "mode": m}))
                for m in modes for a in alphas]
    rows = _rows(variants, run_many([c for _, c in variants], root, threads))
    write_csv(Path(root) / "sweep_alpha.csv", ("mode", "alpha", "method", "seed", *SUMMARY_KEYS, "run_dir"), rows)
    return rows


def sweep_label_noise(cfg: RunConfig, fractions=NOISE_LADDER, root="sweep-noise", threads: int = 1,
                      methods=("standard", "vanilla", "proposed")) -> list[dict]:
    """Every method at every label-noise fraction (training labels only)."""
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ValidationError(f"noise fraction {f} outside [0, 1]")
    variants = [({"fraction": f}, method_config(cfg, m).replace(dataset={"label_noise": f}))
                for f in fractions for m in methods]
    rows = _rows(variants, run_many([c for _, c in variants], root, threads))
    write_csv(Path(root) / "sweep_noise.csv", ("fraction", "method", "seed", *SUMMARY_KEYS, "run_dir"), rows)
    return rows

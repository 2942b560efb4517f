"""Command-line entry point: ``anchornet <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import load_dataset
from .errors import ConfigurationError, FormatError, ValidationError
from .harness.config import RunConfig, check, with_master_seed
from .harness.landscape import run_landscape
from .harness.report import report
from .harness.runs import evaluate_run, load_run, train_run
from .harness.sweeps import (
    ALPHA_LADDER,
    NOISE_LADDER,
    REFSET_LADDER,
    method_config,
    sweep_alpha,
    sweep_label_noise,
    sweep_refset,
)


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t]


def _sizes(text: str) -> list:
    return [None if t == "all" else int(t) for t in text.split(",") if t]


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="run config JSON (defaults built in)")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory")
    p.add_argument("--seed", metavar="N", type=int, default=d,
                   help="master seed; every sub-seed is derived from it")
    p.add_argument("--threads", metavar="N", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="worker processes for sweeps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchornet", description=__doc__)
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    p = add("train", "train one run and write its artifacts")
    p.add_argument("--method", choices=("standard", "vanilla", "proposed"))

    p = add("eval", "evaluate a finished run into metrics.csv")
    p.add_argument("run_dir")
    p.add_argument("--protocols", help="comma separated: single,marginalized,blt")

    p = add("infer", "predict on a .npy image array or a dataset container")
    p.add_argument("run_dir")
    p.add_argument("input")
    p.add_argument("--protocol", default=None)

    p = add("sweep-refset", "proposed vs vanilla over reference-set sizes")
    p.add_argument("--sizes", type=_sizes, default=list(REFSET_LADDER))
    p.add_argument("--replicates", type=int, default=1)

    p = add("sweep-alpha", "ID/OOD accuracy per masking probability and mode")
    p.add_argument("--alphas", type=_floats, default=list(ALPHA_LADDER))
    p.add_argument("--modes", default="replace,augment")
    p.add_argument("--replicates", type=int, default=1)

    p = add("sweep-noise", "standard vs vanilla vs proposed under label noise")
    p.add_argument("--fractions", type=_floats, default=list(NOISE_LADDER))
    p.add_argument("--replicates", type=int, default=1)

    p = add("landscape", "accuracy over a 2-D grid of weight perturbations")
    p.add_argument("run_dir")
    p.add_argument("--n", type=int, default=21)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--normalization", choices=("filter_norm", "global_norm"), default="filter_norm")
    p.add_argument("--direction-seeds", type=int, nargs=2, default=(0, 1))
    p.add_argument("--n-eval", type=int, default=500)

    p = add("report", "aggregate finished runs into mean/std and delta tables")
    p.add_argument("run_dirs", nargs="+")
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = with_master_seed(cfg, args.seed)
    return cfg


def _replicas(cfg: RunConfig, args) -> list[RunConfig]:
    base = args.seed if args.seed is not None else 0
    if args.replicates <= 1:
        return [cfg]
    return [with_master_seed(cfg, base + r) for r in range(args.replicates)]


def _infer(args, out) -> None:
    art = load_run(args.run_dir)
    path = Path(args.input)
    x = np.load(path) if path.suffix == ".npy" else load_dataset(path).images
    res = art.predict(x, args.protocol)
    fh = open(out / "predictions.jsonl", "w", encoding="utf-8") if out else sys.stdout
    try:
        for i in range(res.probs.shape[0]):
            rec = {"probs": [float(p) for p in res.probs[i]], "argmax": int(res.argmax[i])}
            if res.epistemic_std is not None:
                rec["epistemic_std"] = [float(s) for s in res.epistemic_std[i]]
            if res.chosen_reference_index is not None:
                rec["chosen_ref"] = int(res.chosen_reference_index[i])
            fh.write(json.dumps(rec) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()


def run(args) -> int:
    out = Path(args.out) if args.out else None
    cmd = args.command
    if cmd == "train":
        cfg = load_config(args)
        if args.method:
            cfg = method_config(cfg, args.method)
        check(cfg)
        manifest = train_run(cfg, out or Path("run"))
        print(json.dumps(manifest["final_metrics"], sort_keys=True))
    elif cmd == "eval":
        protocols = args.protocols.split(",") if args.protocols else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
        rows = evaluate_run(args.run_dir, out / "metrics.csv" if out else None, protocols)
        print(f"{len(rows)} metric rows")
    elif cmd == "infer":
        if out:
            out.mkdir(parents=True, exist_ok=True)
        _infer(args, out)
    elif cmd in ("sweep-refset", "sweep-alpha", "sweep-noise"):
        cfg = load_config(args)
        rows = []
        for c in _replicas(cfg, args):
            if cmd == "sweep-refset":
                rows += sweep_refset(c, args.sizes, out or Path(cmd), args.threads)
            elif cmd == "sweep-alpha":
                rows += sweep_alpha(c, args.alphas, out or Path(cmd), args.threads, tuple(args.modes.split(",")))
            else:
                rows += sweep_label_noise(c, args.fractions, out or Path(cmd), args.threads)
        for r in rows:
            print(json.dumps({k: v for k, v in r.items() if k != "run_dir"}, sort_keys=True))
    elif cmd == "landscape":
        art = load_run(args.run_dir)
        grid = run_landscape(art, args.n, args.radius, args.normalization, tuple(args.direction_seeds),
                             args.n_eval, out or Path(args.run_dir))
        print(json.dumps({"center": grid.center, "plateau_fraction": grid.plateau_fraction()}))
    elif cmd == "report":
        result = report(args.run_dirs, out or Path("report"))
        print(json.dumps(result["deltas"], sort_keys=True, indent=2))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigurationError, FormatError, ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

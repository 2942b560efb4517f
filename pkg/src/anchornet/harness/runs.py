"""Training runs, run directories and per-run evaluation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .. import __version__
from ..anchoring import MaskingConfig, ReferenceSet, build_reference_set, mean_reference
from ..data import (
    CorruptionSpec,
    Dataset,
    corrupt,
    inject_label_noise,
    load_cifar10,
    make_anomaly_set,
    synthetic_splits,
)
from ..errors import ConfigurationError
from ..inference import (
    InferenceResult,
    ResidualStore,
    predict_blt,
    predict_marginalized,
    predict_single,
    select_candidates,
)
from ..metrics import binned_ece, energy_score, auroc, smoothed_ece, top1_accuracy
from ..models import Model, build, load_checkpoint, predict_logits, save_checkpoint, spec_for
from ..tensor import softmax
from ..training import TrainingConfig, fit
from .config import RunConfig, check

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "run", "method", "seed", "split", "corruption", "severity", "protocol", "n",
    "accuracy", "binned_ece", "smoothed_ece", "anomaly_set", "auroc",
)
TRAJECTORY_COLUMNS = ("epoch", "lr", "task_loss", "mask_loss", "masked_batches", "test_accuracy")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fmt(value) -> str:
    """Locale-independent cell formatting; floats use their shortest round-trip repr."""
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ data


@lru_cache(maxsize=8)
def _splits(kind, num_classes, hw, n_train, n_test, holdout, amplitude, cifar_dir, seed):
    if kind == "cifar10":
        return load_cifar10(cifar_dir, "train"), load_cifar10(cifar_dir, "test")
    return synthetic_splits(num_classes, n_train, n_test, hw, seed, holdout, amplitude=amplitude)


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Train/test splits for ``cfg``, with label noise applied to train only."""
    ds = cfg.dataset
    train, test = _splits(ds.kind, ds.num_classes, tuple(ds.hw), ds.n_train, ds.n_test,
                          ds.holdout_classes, float(ds.amplitude), ds.cifar_dir, cfg.seeds.dataset)
    if ds.label_noise:
        train = inject_label_noise(train, ds.label_noise, cfg.seeds.data)
    return train, test


@lru_cache(maxsize=64)
def _corrupted_cached(key, kind, severity, seed, _holder):
    return corrupt(_holder.ds, CorruptionSpec(kind, severity, seed))


class _Holder:
    # hashable wrapper so a dataset can ride through lru_cache by identity
    def __init__(self, ds):
        self.ds = ds

    def __hash__(self):
        return id(self.ds)

    def __eq__(self, other):
        return self.ds is other.ds


_holders: dict[int, _Holder] = {}


def corrupted(test: Dataset, kind: str, severity: int, seed: int) -> Dataset:
    holder = _holders.setdefault(id(test), _Holder(test))
    return _corrupted_cached(id(test), kind, severity, seed, holder)


# ------------------------------------------------------------------ training


@dataclass
class RunArtifacts:
    config: RunConfig
    model: Model
    ref_set: ReferenceSet | None
    store: ResidualStore | None
    train: Dataset
    test: Dataset
    run_dir: Path | None = None

    @property
    def method(self) -> str:
        return self.config.method

    @property
    def primary_protocol(self) -> str:
        return "single" if self.ref_set is not None else "standard"

    def single_reference(self) -> np.ndarray:
        ev = self.config.evaluation
        if ev.single_reference == "mean":
            return mean_reference(self.ref_set)
        rng = np.random.default_rng(self.config.seeds.evaluation)
        return self.ref_set.samples[rng.integers(0, len(self.ref_set))][None]

    def predict(self, x, protocol: str | None = None) -> InferenceResult:
        protocol = protocol or self.primary_protocol
        x = np.asarray(x, dtype=np.float64)
        ev = self.config.evaluation
        if self.ref_set is None:
            if protocol not in ("standard", "single"):
                raise ConfigurationError(f"protocol {protocol!r} needs an anchored model")
            logits = predict_logits(self.model, x)
            return InferenceResult(softmax(logits), logits)
        if protocol == "single":
            return predict_single(self.model, x, reference=self.single_reference())
        if protocol == "marginalized":
            return predict_marginalized(self.model, x, self.ref_set, ev.k,
                                        np.random.default_rng(self.config.seeds.evaluation))
        if protocol == "blt":
            cands = select_candidates(self.ref_set, ev.blt_candidates, self.config.seeds.evaluation)
            return predict_blt(self.model, x, cands, ev.blt_criterion, self.store)
        raise ConfigurationError(f"unknown protocol {protocol!r}")


def build_model_spec(cfg: RunConfig, train: Dataset):
    return spec_for(train.channels, train.hw, train.num_classes, kind=cfg.model.kind,
                    hidden=cfg.model.hidden, anchored=cfg.anchoring.enabled,
                    init_seed=cfg.seeds.init)


def training_config(cfg: RunConfig) -> TrainingConfig:
    t = cfg.training
    return TrainingConfig(t.epochs, t.batch_size, t.learning_rate, tuple(t.milestones), t.gamma,
                          t.momentum, t.weight_decay)


def train_artifacts(cfg: RunConfig, *, track_test: bool = True) -> tuple[RunArtifacts, list]:
    """Train in memory; returns the artifacts and the per-epoch trajectory."""
    check(cfg)
    train, test = load_data(cfg)
    model = build(build_model_spec(cfg, train))
    an = cfg.anchoring
    ref_set = None
    masking = None
    if an.enabled:
        ref_set = build_reference_set(train, an.refset_size, an.refset_policy, cfg.seeds.reference)
        masking = MaskingConfig(an.alpha, an.schedule, an.mode, cfg.seeds.masking, an.mask_weight)
    art = RunArtifacts(cfg, model, ref_set, None, train, test)

    def epoch_eval(m):
        return {"test_accuracy": top1_accuracy(art.predict(test.images).probs, test.labels)}

    result = fit(model, train, training_config(cfg), ref_set=ref_set, masking=masking,
                 data_seed=cfg.seeds.data, reference_seed=cfg.seeds.reference,
                 masking_seed=cfg.seeds.masking, residual_store_size=an.residual_store_size,
                 epoch_eval=epoch_eval if track_test else None)
    art.store = result.residual_store
    return art, result.trajectory


def train_run(cfg: RunConfig, out_dir) -> dict:
    """Train, then write manifest.json, model.ckpt, refset.json, residuals.npy, trajectory.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art, traj = train_artifacts(cfg)
    save_checkpoint(art.model, out / "model.ckpt")
    files = ["model.ckpt", "trajectory.csv"]
    write_csv(out / "trajectory.csv", TRAJECTORY_COLUMNS, traj)
    if art.ref_set is not None:
        (out / "refset.json").write_text(art.ref_set.to_json(), encoding="utf-8")
        with open(out / "residuals.npy", "wb") as fh:
            np.save(fh, art.store.residuals)
        files += ["refset.json", "residuals.npy"]
    final = {
        "test_accuracy": top1_accuracy(art.predict(art.test.images).probs, art.test.labels),
        "train_task_loss": traj[-1]["task_loss"],
    }
    manifest = {
        "library_version": __version__,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "method": cfg.method,
        "dataset_provenance": art.train.provenance,
        "trajectory": traj,
        "final_metrics": final,
        "digests": {f: sha256_file(out / f) for f in sorted(files)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    art.run_dir = out
    return manifest


def load_run(run_dir) -> RunArtifacts:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(manifest["config"])
    train, test = load_data(cfg)
    model = load_checkpoint(run_dir / "model.ckpt")
    ref_set = store = None
    if cfg.anchoring.enabled:
        ref_set = ReferenceSet.from_json((run_dir / "refset.json").read_text(encoding="utf-8"), train)
        store = ResidualStore.load(run_dir / "residuals.npy")
    return RunArtifacts(cfg, model, ref_set, store, train, test, run_dir)


# ------------------------------------------------------------------ evaluation


def evaluate_artifacts(art: RunArtifacts, run_name: str = "run", protocols=None) -> tuple[list, list]:
    """Metric rows plus a list of warning records for skipped evaluations."""
    cfg = art.config
    ev = cfg.evaluation
    if protocols is None:
        protocols = list(ev.protocols) if art.ref_set is not None else ["standard"]
    base = {"run": run_name, "method": cfg.method, "seed": cfg.seeds.init}
    rows, warns = [], []

    def metric_row(split, kind, sev, protocol, ds):
        res = art.predict(ds.images, protocol)
        return {**base, "split": split, "corruption": kind, "severity": sev, "protocol": protocol,
                "n": len(ds), "accuracy": top1_accuracy(res.probs, ds.labels),
                "binned_ece": binned_ece(res.probs, ds.labels, ev.ece_bins).binned_ece,
                "smoothed_ece": smoothed_ece(res.probs, ds.labels, ev.ece_bandwidth)}

    for p in protocols:
        rows.append(metric_row("id", "none", 0, p, art.test))
    for kind in ev.corruptions:
        for sev in ev.severities:
            ds = corrupted(art.test, kind, sev, cfg.seeds.corruption)
            for p in protocols:
                rows.append(metric_row("corrupted", kind, sev, p, ds))
    primary = art.primary_protocol
    id_energy = energy_score(art.predict(art.test.images, primary).logits, ev.energy_temperature)
    for name in ev.anomaly_sets:
        try:
            anom = make_anomaly_set(name, art.train, ev.n_anomaly, cfg.seeds.evaluation)
        except ConfigurationError as exc:
            warns.append({"anomaly_set": name, "warning": str(exc)})
            warnings.warn(f"skipping anomaly set {name}: {exc}", stacklevel=2)
            continue
        ood_energy = energy_score(art.predict(anom.images, primary).logits, ev.energy_temperature)
        rows.append({**base, "split": "anomaly", "corruption": "none", "severity": 0,
                     "protocol": primary, "n": len(anom), "anomaly_set": name,
                     "auroc": auroc(id_energy, ood_energy)})
    return rows, warns


def summarize(rows: list[dict], protocol: str) -> dict:
    """Per-run headline numbers from metric rows (values may be strings from CSV)."""
    def f(v):
        return float(v) if v not in (None, "") else None

    sel = [r for r in rows if r["protocol"] == protocol]
    out = {}
    ids = [f(r["accuracy"]) for r in sel if r["split"] == "id"]
    if ids:
        out["id_accuracy"] = ids[0]
    cor = [r for r in sel if r["split"] == "corrupted"]
    if cor:
        out["ood_accuracy"] = float(np.mean([f(r["accuracy"]) for r in cor]))
        for sev in sorted({int(r["severity"]) for r in cor}):
            out[f"sev{sev}_accuracy"] = float(np.mean([f(r["accuracy"]) for r in cor if int(r["severity"]) == sev]))
        hi = [f(r["accuracy"]) for r in cor if int(r["severity"]) >= 3]
        if hi:
            out["sev345_accuracy"] = float(np.mean(hi))
        out["smoothed_ece_ood"] = float(np.mean([f(r["smoothed_ece"]) for r in cor]))
    for r in sel:
        if r["split"] == "anomaly":
            out[f"auroc_{r['anomaly_set']}"] = f(r["auroc"])
    return out


def evaluate_run(run_dir, out_csv=None, protocols=None) -> list[dict]:
    """Write metrics.csv and metrics.json into the run directory (or ``out_csv``)."""
    run_dir = Path(run_dir)
    art = load_run(run_dir)
    rows, warns = evaluate_artifacts(art, run_dir.name, protocols)
    out_csv = Path(out_csv) if out_csv else run_dir / "metrics.csv"
    write_csv(out_csv, METRIC_COLUMNS, rows)
    summary = {"method": art.method, "primary_protocol": art.primary_protocol,
               "summary": summarize(rows, art.primary_protocol), "warnings": warns}
    (out_csv.parent / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return rows

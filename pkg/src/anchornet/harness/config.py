"""Run configuration: strict JSON schema with one named seed per stochastic subsystem."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any

from ..data import CORRUPTION_KINDS, DEFAULT_AMPLITUDE
from ..errors import ConfigurationError

PROTOCOLS = ("single", "marginalized", "blt")
ANOMALY_SETS = ("uniform_noise", "class_holdout")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 10
    hw: tuple = (16, 16)
    n_train: int = 5000
    n_test: int = 1000
    holdout_classes: int = 2
    amplitude: float = DEFAULT_AMPLITUDE
    cifar_dir: str | None = None
    label_noise: float = 0.0


@dataclass
class ModelConfig:
    kind: str = "small_cnn"
    hidden: list | None = None


@dataclass
class TrainingSection:
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 0.05
    milestones: list = field(default_factory=lambda: [10, 13])
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class AnchoringConfig:
    enabled: bool = True
    refset_size: int | None = None
    refset_policy: str = "class_balanced"
    alpha: float = 0.25
    schedule: str = "periodic"
    mode: str = "augment"
    mask_weight: float = 1.0
    residual_store_size: int = 512


@dataclass
class EvaluationConfig:
    protocols: list = field(default_factory=lambda: ["single"])
    single_reference: str = "mean"
    k: int = 10
    blt_candidates: int = 50
    blt_criterion: str = "max_confidence"
    corruptions: list = field(default_factory=lambda: list(CORRUPTION_KINDS))
    severities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    anomaly_sets: list = field(default_factory=lambda: list(ANOMALY_SETS))
    n_anomaly: int = 1000
    ece_bins: int = 15
    ece_bandwidth: float = 0.05
    energy_temperature: float = 1.0


@dataclass
class SeedConfig:
    dataset: int = 0
    init: int = 0
    data: int = 0
    reference: int = 0
    masking: int = 0
    corruption: int = 0
    evaluation: int = 0


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    anchoring: AnchoringConfig = field(default_factory=AnchoringConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    @property
    def method(self) -> str:
        """``standard``, ``vanilla`` (anchoring without masking) or ``proposed``."""
        if not self.anchoring.enabled:
            return "standard"
        return "vanilla" if self.anchoring.alpha == 0 else "proposed"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def replace(self, **sections: dict) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``cfg.replace(anchoring={"alpha": 0})``."""
        d = self.to_dict()
        for name, updates in sections.items():
            if name not in d:
                raise ConfigurationError(f"unknown config section {name!r}")
            d[name].update(updates)
        return RunConfig.from_dict(d)


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in d.items():
        ftype = known[name].type
        sub = _SECTIONS.get(ftype) if isinstance(ftype, str) else _SECTIONS.get(getattr(ftype, "__name__", ""))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    return cls(**kwargs)


_SECTIONS = {
    "DatasetConfig": DatasetConfig,
    "ModelConfig": ModelConfig,
    "TrainingSection": TrainingSection,
    "AnchoringConfig": AnchoringConfig,
    "EvaluationConfig": EvaluationConfig,
    "SeedConfig": SeedConfig,
}


def derive_seed(master: int, name: str) -> int:
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def with_master_seed(cfg: RunConfig, master: int) -> RunConfig:
    """Override every sub-seed by derivation from one master seed."""
    seeds = {f.name: derive_seed(master, f.name) for f in fields(SeedConfig)}
    return cfg.replace(seeds=seeds)


def validate(cfg: RunConfig) -> list[str]:
    """Every problem with ``cfg``; an empty list means runnable."""
    errs = []
    ds, an, ev, tr = cfg.dataset, cfg.anchoring, cfg.evaluation, cfg.training
    if ds.kind not in ("synthetic", "cifar10"):
        errs.append(f"dataset.kind must be synthetic or cifar10, got {ds.kind!r}")
    if ds.kind == "cifar10" and not ds.cifar_dir:
        errs.append("dataset.cifar_dir is required for cifar10")
    if ds.num_classes < 2:
        errs.append("dataset.num_classes must be >= 2")
    if not 0.0 <= ds.label_noise <= 1.0:
        errs.append("dataset.label_noise must lie in [0, 1]")
    if cfg.model.kind not in ("small_cnn", "mlp"):
        errs.append(f"model.kind must be small_cnn or mlp, got {cfg.model.kind!r}")
    if tr.epochs < 1 or tr.batch_size < 1 or tr.learning_rate <= 0:
        errs.append("training.epochs, batch_size and learning_rate must be positive")
    if not 0.0 <= tr.momentum < 1.0:
        errs.append("training.momentum must lie in [0, 1)")
    if not 0.0 <= an.alpha <= 1.0:
        errs.append("anchoring.alpha must lie in [0, 1]")
    if an.schedule not in ("periodic", "bernoulli"):
        errs.append(f"anchoring.schedule invalid: {an.schedule!r}")
    if an.mode not in ("replace", "augment"):
        errs.append(f"anchoring.mode invalid: {an.mode!r}")
    if an.refset_policy not in ("uniform_random", "class_balanced"):
        errs.append(f"anchoring.refset_policy invalid: {an.refset_policy!r}")
    if an.refset_size is not None and not 1 <= an.refset_size <= ds.n_train:
        errs.append(f"anchoring.refset_size must be in [1, {ds.n_train}]")
    bad = [p for p in ev.protocols if p not in PROTOCOLS]
    if bad:
        errs.append(f"evaluation.protocols contains unknown entries {bad}")
    if not an.enabled and any(p != "single" for p in ev.protocols):
        errs.append("marginalized/blt protocols require anchoring.enabled")
    if ev.single_reference not in ("mean", "random"):
        errs.append("evaluation.single_reference must be mean or random")
    bad = [k for k in ev.corruptions if k not in CORRUPTION_KINDS]
    if bad:
        errs.append(f"evaluation.corruptions contains unknown kinds {bad}")
    bad = [s for s in ev.severities if s not in (1, 2, 3, 4, 5)]
    if bad:
        errs.append(f"evaluation.severities must be within 1..5, got {bad}")
    bad = [a for a in ev.anomaly_sets if a not in ANOMALY_SETS]
    if bad:
        errs.append(f"evaluation.anomaly_sets contains unknown sets {bad}")
    if ev.k < 1 or ev.blt_candidates < 1:
        errs.append("evaluation.k and blt_candidates must be >= 1")
    return errs


def check(cfg: RunConfig) -> None:
    errs = validate(cfg)
    if errs:
        raise ConfigurationError("invalid run config:\n  " + "\n  ".join(errs))

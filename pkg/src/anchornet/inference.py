"""Inference protocols for anchored models: single reference, K-reference
marginalization, and per-sample reference search (BLT-style transduction)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .anchoring import ReferenceSet, anchor, mean_reference, sample_reference_indices
from .errors import ConfigurationError, DimensionError, ValidationError
from .models import Model, predict_logits
from .tensor import softmax

BLT_CRITERIA = ("max_confidence", "nearest_residual")


@dataclass
class InferenceResult:
    probs: np.ndarray
    logits: np.ndarray | None = field(default=None, repr=False)
    epistemic_std: np.ndarray | None = None
    chosen_reference_index: np.ndarray | None = None
    wall_seconds_per_1000: float = 0.0

    @property
    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


@dataclass
class ResidualStore:
    """Flattened training residuals standing in for the residual distribution."""

    residuals: np.ndarray

    def __len__(self) -> int:
        return self.residuals.shape[0]

    def nearest_distance(self, queries: np.ndarray) -> np.ndarray:
        """L2 distance from each flattened query row to its nearest stored residual."""
        if len(self) == 0:
            raise ConfigurationError("residual store is empty")
        q = queries.reshape(queries.shape[0], -1)
        d2 = (q * q).sum(1)[:, None] - 2.0 * q @ self.residuals.T + (self.residuals ** 2).sum(1)[None, :]
        return np.sqrt(np.maximum(d2.min(axis=1), 0.0))

    def save(self, path) -> None:
        np.save(path, self.residuals)

    @classmethod
    def load(cls, path) -> "ResidualStore":
        return cls(np.load(path))


class ResidualReservoir:
    """Reservoir sampling (algorithm R) over residual batches seen in training."""

    def __init__(self, capacity: int = 512, seed: int = 0):
        if capacity < 1:
            raise ValidationError("reservoir capacity must be >= 1")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.seen = 0
        self.items: list[np.ndarray] = []

    def add(self, residuals: np.ndarray) -> None:
        for row in residuals.reshape(residuals.shape[0], -1):
            if len(self.items) < self.capacity:
                self.items.append(row.copy())
            else:
                j = int(self.rng.integers(0, self.seen + 1))
                if j < self.capacity:
                    self.items[j] = row.copy()
            self.seen += 1

    def store(self) -> ResidualStore:
        if not self.items:
            return ResidualStore(np.zeros((0, 0)))
        return ResidualStore(np.stack(self.items))


def _require_anchored(model: Model):
    if not model.spec.anchored:
        raise ConfigurationError("anchored inference protocols need an anchored model")


def _logits_for(model: Model, x: np.ndarray, refs: np.ndarray, batch_size: int) -> np.ndarray:
    return predict_logits(model, anchor(x, refs).joint, batch_size)


def predict_single(model: Model, x, reference=None, ref_set: ReferenceSet | None = None,
                   batch_size: int = 500) -> InferenceResult:
    """One reference for every sample; defaults to the mean of the reference set."""
    _require_anchored(model)
    x = np.asarray(x, dtype=np.float64)
    if reference is None:
        if ref_set is None:
            raise ConfigurationError("pass a reference or a reference set")
        reference = mean_reference(ref_set)
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim == 3:
        reference = reference[None]
    if reference.shape[1:] != x.shape[1:] or reference.shape[0] not in (1, x.shape[0]):
        raise DimensionError(f"reference {reference.shape} does not match inputs {x.shape}")
    t0 = time.perf_counter()
    logits = _logits_for(model, x, reference, batch_size)
    probs = softmax(logits)
    dt = time.perf_counter() - t0
    return InferenceResult(probs, logits, wall_seconds_per_1000=1000.0 * dt / max(1, x.shape[0]))


def predict_marginalized(model: Model, x, ref_set: ReferenceSet, k: int = 10,
                         rng: np.random.Generator | None = None, batch_size: int = 500) -> InferenceResult:
    """Average softmax outputs over K independently drawn references per sample.

    ``epistemic_std`` is the per-class population standard deviation over the
    K predictions.
    """
    _require_anchored(model)
    if k < 1:
        raise ValidationError("K must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(0) if rng is None else rng
    t0 = time.perf_counter()
    preds = np.empty((k, x.shape[0], model.spec.num_classes))
    logit_sum = np.zeros((x.shape[0], model.spec.num_classes))
    for j in range(k):
        refs = ref_set.samples[sample_reference_indices(ref_set, x.shape[0], rng)]
        logits = _logits_for(model, x, refs, batch_size)
        logit_sum += logits
        preds[j] = softmax(logits)
    probs = preds.mean(axis=0)
    std = preds.std(axis=0)
    # the mean of K equal values can be off by an ulp; pin the spread to zero
    std[preds.min(axis=0) == preds.max(axis=0)] = 0.0
    dt = time.perf_counter() - t0
    return InferenceResult(probs, logit_sum / k, epistemic_std=std,
                           wall_seconds_per_1000=1000.0 * dt / max(1, x.shape[0]))


def select_candidates(ref_set: ReferenceSet, s: int = 50, seed: int = 0) -> np.ndarray:
    """A fixed random subset of S reference-set members to search over."""
    s = min(s, len(ref_set))
    idx = np.random.default_rng(seed).permutation(len(ref_set))[:s]
    return ref_set.samples[np.sort(idx)]


def predict_blt(model: Model, x, candidate_refs, criterion: str = "max_confidence",
                store: ResidualStore | None = None, batch_size: int = 500) -> InferenceResult:
    """Per-sample search over S candidate references.

    ``max_confidence`` keeps the candidate whose prediction has the largest
    max-probability; ``nearest_residual`` keeps the candidate whose residual
    ``x - r`` is closest to a stored training residual. Ties go to the lowest
    candidate index.
    """
    _require_anchored(model)
    if criterion not in BLT_CRITERIA:
        raise ValidationError(f"unknown BLT criterion {criterion!r}")
    x = np.asarray(x, dtype=np.float64)
    cands = np.asarray(candidate_refs, dtype=np.float64)
    if cands.ndim != 4 or cands.shape[0] < 1 or cands.shape[1:] != x.shape[1:]:
        raise DimensionError(f"candidates {cands.shape} do not match inputs {x.shape}")
    if criterion == "nearest_residual" and (store is None or len(store) == 0):
        raise ConfigurationError("nearest_residual needs a non-empty residual store")
    n, s = x.shape[0], cands.shape[0]
    t0 = time.perf_counter()
    all_logits = np.empty((s, n, model.spec.num_classes))
    scores = np.empty((s, n))
    for j in range(s):
        all_logits[j] = _logits_for(model, x, cands[j : j + 1], batch_size)
        if criterion == "max_confidence":
            scores[j] = softmax(all_logits[j]).max(axis=1)
        else:
            scores[j] = -store.nearest_distance(x - cands[j : j + 1])
    # argmax returns the first maximum, i.e. the lowest candidate index
    chosen = np.argmax(scores, axis=0)
    logits = all_logits[chosen, np.arange(n)]
    probs = softmax(logits)
    dt = time.perf_counter() - t0
    return InferenceResult(probs, logits, chosen_reference_index=chosen,
                           wall_seconds_per_1000=1000.0 * dt / max(1, n))


def time_protocol(protocol: str, model: Model, x, n: int = 1000, *, ref_set: ReferenceSet,
                  k: int = 10, candidates=None, criterion: str = "max_confidence",
                  store: ResidualStore | None = None, seed: int = 0) -> float:
    """Wall-clock seconds per 1000 samples for one protocol on the first ``n`` inputs."""
    if n < 100:
        raise ValidationError("timing needs n >= 100")
    x = np.asarray(x, dtype=np.float64)[:n]
    t0 = time.perf_counter()
    if protocol == "single":
        predict_single(model, x, ref_set=ref_set)
    elif protocol == "marginalized":
        predict_marginalized(model, x, ref_set, k, np.random.default_rng(seed))
    elif protocol == "blt":
        if candidates is None:
            candidates = select_candidates(ref_set, 50, seed)
        predict_blt(model, x, candidates, criterion, store)
    else:
        raise ValidationError(f"unknown protocol {protocol!r}")
    return 1000.0 * (time.perf_counter() - t0) / x.shape[0]

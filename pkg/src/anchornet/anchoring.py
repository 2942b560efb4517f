"""Anchored input reparameterization and the reference-masking regularizer.

An input ``x`` is paired with a reference ``r`` drawn from a reference set
and fed to the network as the channel stack ``[r, x - r]``.  Reference
masking zeroes the reference half (keeping the residual ``x - r``) and
trains the masked tuple toward the uniform distribution over classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigurationError, ContractError, DimensionError, ValidationError
from .models import Model, forward
from .optim import SgdState, sgd_step

POLICIES = ("uniform_random", "class_balanced")


@dataclass(frozen=True)
class ReferenceSet:
    samples: np.ndarray
    indices: np.ndarray
    construction_seed: int
    diversity_policy: str
    source_size: int
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.samples.shape[0]

    def to_json(self) -> str:
        return json.dumps({
            "indices": [int(i) for i in self.indices],
            "seed": int(self.construction_seed),
            "policy": self.diversity_policy,
            "source_size": int(self.source_size),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, train_data: Dataset) -> "ReferenceSet":
        d = json.loads(text)
        if d["source_size"] != len(train_data):
            raise ValidationError(
                f"reference set was drawn from {d['source_size']} samples, dataset has {len(train_data)}")
        idx = np.asarray(d["indices"], dtype=np.int64)
        return cls(train_data.images[idx], idx, d["seed"], d["policy"], d["source_size"],
                   train_data.labels[idx])


def _class_balanced_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # class order comes from first appearance in a seeded permutation, so
    # renaming the classes never changes the selection
    perm = rng.permutation(labels.shape[0])
    buckets: dict[int, list[int]] = {}
    for i in perm:
        buckets.setdefault(int(labels[i]), []).append(int(i))
    queues = list(buckets.values())
    order = []
    depth = 0
    while len(order) < labels.shape[0]:
        for q in queues:
            if depth < len(q):
                order.append(q[depth])
        depth += 1
    return np.asarray(order, dtype=np.int64)


def build_reference_set(train_data: Dataset, size: int | None, policy: str = "uniform_random",
                        seed: int = 0) -> ReferenceSet:
    """Sample ``size`` distinct training examples (``None`` means all of them)."""
    n = len(train_data)
    size = n if size is None else int(size)
    if not 1 <= size <= n:
        raise ValidationError(f"reference set size must be in [1, {n}], got {size}")
    if policy not in POLICIES:
        raise ValidationError(f"unknown diversity policy {policy!r}")
    rng = np.random.default_rng(seed)
    if policy == "uniform_random":
        idx = rng.permutation(n)[:size]
    else:
        idx = _class_balanced_order(train_data.labels, rng)[:size]
    return ReferenceSet(train_data.images[idx], idx, seed, policy, n, train_data.labels[idx])


def sample_reference_indices(ref_set: ReferenceSet, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(ref_set) == 0:
        raise ValidationError("reference set is empty")
    return rng.integers(0, len(ref_set), size=n)


def sample_references(ref_set: ReferenceSet, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws with replacement, shape (n, C, H, W)."""
    return ref_set.samples[sample_reference_indices(ref_set, n, rng)]


def mean_reference(ref_set: ReferenceSet) -> np.ndarray:
    if len(ref_set) == 0:
        raise ValidationError("reference set is empty")
    return ref_set.samples.mean(axis=0, keepdims=True)


@dataclass(frozen=True)
class AnchoredBatch:
    reference: np.ndarray
    residual: np.ndarray
    joint: np.ndarray
    masked: bool = False

    @property
    def channels(self) -> int:
        return self.residual.shape[1]


def anchor(x, refs) -> AnchoredBatch:
    """Channel stack ``[refs, x - refs]``; a single (1, C, H, W) reference is broadcast.

    ``reference + residual == x`` holds bit for bit whenever ``x - refs`` is
    representable, e.g. for inputs on the float32 grid as held by :class:`Dataset`.
    """
    x = np.asarray(x, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if refs.shape != x.shape:
        if refs.ndim == x.ndim and refs.shape[0] == 1 and refs.shape[1:] == x.shape[1:]:
            refs = np.broadcast_to(refs, x.shape)
        else:
            raise DimensionError(f"anchor: input {x.shape} vs references {refs.shape}")
    residual = x - refs
    joint = np.concatenate([refs, residual], axis=1)
    return AnchoredBatch(np.ascontiguousarray(refs), residual, joint, False)


def mask(batch: AnchoredBatch) -> AnchoredBatch:
    """Zero the reference channels of ``joint``; the residual is left untouched."""
    if batch.masked:
        raise ContractError("batch is already masked")
    c = batch.channels
    joint = batch.joint.copy()
    joint[:, :c] = 0.0
    return AnchoredBatch(batch.reference, batch.residual, joint, True)


@dataclass(frozen=True)
class MaskingConfig:
    alpha: float = 0.25
    schedule: str = "periodic"
    mode: str = "augment"
    seed: int = 0
    mask_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.schedule not in ("periodic", "bernoulli"):
            raise ValidationError(f"unknown masking schedule {self.schedule!r}")
        if self.mode not in ("replace", "augment"):
            raise ValidationError(f"unknown masking mode {self.mode!r}")
        if self.mask_weight < 0:
            raise ValidationError("mask_weight must be nonnegative")

    @property
    def period(self) -> int | None:
        return None if self.alpha == 0 else max(1, round(1.0 / self.alpha))


def should_mask(batch_index: int, cfg: MaskingConfig, rng: np.random.Generator | None = None) -> bool:
    """Whole-batch masking decision.

    periodic: every ``round(1/alpha)``-th batch (1-based) is masked.
    bernoulli: one uniform draw per call from the masking stream.
    """
    if cfg.schedule == "periodic":
        if cfg.alpha == 0:
            return False
        return (batch_index + 1) % cfg.period == 0
    if rng is None:
        raise ConfigurationError("bernoulli masking needs a masking rng stream")
    return bool(rng.random() < cfg.alpha)


@dataclass
class StepReport:
    task_loss: float | None
    mask_loss: float | None
    masked: bool
    batch: AnchoredBatch | None = field(default=None, repr=False)

    @property
    def loss(self) -> float:
        return (self.task_loss or 0.0) + (self.mask_loss or 0.0)


def anchored_training_step(model: Model, x, labels, ref_set: ReferenceSet, cfg: MaskingConfig,
                           opt: SgdState, batch_index: int, rng: np.random.Generator,
                           mask_rng: np.random.Generator | None = None) -> StepReport:
    """One SGD step on the anchored objective, with reference masking when scheduled.

    References are drawn from ``rng`` on every call (masked or not) so the
    reference stream stays aligned across runs that differ only in alpha.
    ``mask_loss`` is reported unweighted; ``cfg.mask_weight`` scales its
    gradient contribution.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if model.spec.first_layer_channels != 2 * x.shape[1]:
        raise DimensionError(
            f"model first layer takes {model.spec.first_layer_channels} channels, "
            f"anchored input has {2 * x.shape[1]}")
    refs = sample_references(ref_set, x.shape[0], rng)
    batch = anchor(x, refs)
    masked = should_mask(batch_index, cfg, mask_rng)
    ncls = model.spec.num_classes
    task = mask_term = None
    with T.Tape() as tape:
        terms = []
        if not masked or cfg.mode == "augment":
            task = T.cross_entropy_soft(forward(model, batch.joint), T.one_hot(labels, ncls))
            terms.append(task)
        if masked:
            mask_term = T.cross_entropy_soft(forward(model, mask(batch).joint),
                                             T.uniform_target(x.shape[0], ncls))
            terms.append(T.scale(mask_term, cfg.mask_weight) if cfg.mask_weight != 1.0 else mask_term)
        loss = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    model.zero_grad()
    T.backward(loss, tape)
    sgd_step(model.parameters, opt)
    model.zero_grad()
    return StepReport(
        task_loss=None if task is None else task.item(),
        mask_loss=None if mask_term is None else mask_term.item(),
        masked=masked,
        batch=batch,
    )


def standard_training_step(model: Model, x, labels, opt: SgdState) -> StepReport:
    """Plain cross-entropy step on raw inputs (the non-anchored baseline)."""
    x = np.asarray(x, dtype=np.float64)
    with T.Tape() as tape:
        loss = T.cross_entropy_soft(forward(model, x), T.one_hot(labels, model.spec.num_classes))
    model.zero_grad()
    T.backward(loss, tape)
    sgd_step(model.parameters, opt)
    model.zero_grad()
    return StepReport(task_loss=loss.item(), mask_loss=None, masked=False)

"""Epoch loop shared by the experiment harness and the estimator wrapper."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .anchoring import (
    MaskingConfig,
    ReferenceSet,
    anchored_training_step,
    standard_training_step,
)
from .data import Dataset
from .errors import ValidationError
from .inference import ResidualReservoir, ResidualStore
from .models import Model
from .optim import SgdState, multistep_lr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 0.05
    milestones: tuple = (10, 13)
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")


@dataclass
class FitResult:
    trajectory: list = field(default_factory=list)
    residual_store: Optional[ResidualStore] = None


def fit(model: Model, train: Dataset, cfg: TrainingConfig, *, ref_set: ReferenceSet | None = None,
        masking: MaskingConfig | None = None, data_seed: int = 0, reference_seed: int = 0,
        masking_seed: int = 0, residual_store_size: int = 512,
        epoch_eval: Callable[[Model], dict] | None = None) -> FitResult:
    """Train ``model`` in place.

    With ``ref_set`` the model is trained on anchored tuples (masking per
    ``masking``); without it, on raw inputs.  Shuffling, reference draws and
    Bernoulli masking each use their own generator, so changing one seed
    never perturbs the other streams.
    """
    anchored = ref_set is not None
    if anchored and not model.spec.anchored:
        raise ValidationError("anchored training needs an anchored model spec")
    masking = masking or MaskingConfig(alpha=0.0)
    data_rng = np.random.default_rng(data_seed)
    ref_rng = np.random.default_rng(reference_seed)
    mask_rng = np.random.default_rng(masking_seed)
    reservoir = ResidualReservoir(residual_store_size, seed=reference_seed + 1) if anchored else None
    opt = SgdState(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    result = FitResult()
    n = len(train)
    for epoch in range(cfg.epochs):
        opt.learning_rate = multistep_lr(cfg.learning_rate, cfg.milestones, cfg.gamma, epoch)
        perm = data_rng.permutation(n)
        task_losses, mask_losses, masked = [], [], 0
        last_epoch = epoch == cfg.epochs - 1
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            x, y = train.images[idx], train.labels[idx]
            if anchored:
                rep = anchored_training_step(model, x, y, ref_set, masking, opt, b, ref_rng, mask_rng)
                if last_epoch:
                    reservoir.add(rep.batch.residual)
            else:
                rep = standard_training_step(model, x, y, opt)
            if rep.task_loss is not None:
                task_losses.append(rep.task_loss)
            if rep.mask_loss is not None:
                mask_losses.append(rep.mask_loss)
            masked += rep.masked
        row = {
            "epoch": epoch,
            "lr": opt.learning_rate,
            "task_loss": float(np.mean(task_losses)) if task_losses else float("nan"),
            "mask_loss": float(np.mean(mask_losses)) if mask_losses else float("nan"),
            "masked_batches": masked,
        }
        if epoch_eval is not None:
            row.update(epoch_eval(model))
        result.trajectory.append(row)
        log.info("epoch %d %s", epoch, row)
    if reservoir is not None:
        result.residual_store = reservoir.store()
    return result

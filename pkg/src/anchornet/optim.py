"""SGD with momentum and a multi-step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, ValidationError
from .tensor import Tensor


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be nonnegative")


def sgd_step(params: Mapping[str, Tensor], state: SgdState) -> None:
    """One in-place update: ``v = m*v + (g + wd*p)``; ``p -= lr*v``.

    Every parameter must carry a gradient. Gradients are left in place;
    callers clear them with :func:`zero_grad`.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"missing gradient for parameters: {', '.join(missing)}")
    for name, p in params.items():
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.velocity.get(name)
        if v is None or v.shape != p.shape:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g
        state.velocity[name] = v
        p.data -= state.learning_rate * v


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def multistep_lr(initial: float, milestones: Sequence[int], gamma: float, epoch: int) -> float:
    """Learning rate for ``epoch`` (0-based): decayed by ``gamma`` at each passed milestone."""
    passed = sum(1 for m in milestones if epoch >= m)
    return initial * gamma**passed

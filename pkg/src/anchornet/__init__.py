"""Anchored training of small image classifiers on a from-scratch autodiff engine."""

__version__ = "0.1.0"

from .anchoring import (
    AnchoredBatch,
    MaskingConfig,
    ReferenceSet,
    anchor,
    anchored_training_step,
    build_reference_set,
    mask,
    should_mask,
)
from .data import CorruptionSpec, Dataset, corrupt, gen_synthetic, inject_label_noise, make_anomaly_set
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    FormatError,
    NumericalError,
    ValidationError,
)
from .inference import (
    InferenceResult,
    ResidualStore,
    predict_blt,
    predict_marginalized,
    predict_single,
)
from .metrics import auroc, binned_ece, energy_score, smoothed_ece, top1_accuracy
from .models import Model, ModelSpec, build, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, backward

__all__ = [
    "AnchoredBatch",
    "ConfigurationError",
    "ContractError",
    "CorruptionSpec",
    "Dataset",
    "DimensionError",
    "FormatError",
    "InferenceResult",
    "MaskingConfig",
    "Model",
    "ModelSpec",
    "NumericalError",
    "ReferenceSet",
    "ResidualStore",
    "Tape",
    "Tensor",
    "ValidationError",
    "anchor",
    "anchored_training_step",
    "auroc",
    "backward",
    "binned_ece",
    "build",
    "build_reference_set",
    "corrupt",
    "energy_score",
    "gen_synthetic",
    "inject_label_noise",
    "load_checkpoint",
    "make_anomaly_set",
    "mask",
    "predict_blt",
    "predict_marginalized",
    "predict_single",
    "save_checkpoint",
    "should_mask",
    "smoothed_ece",
    "top1_accuracy",
]

"""scikit-learn style wrappers around anchored training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .anchoring import MaskingConfig, anchor, build_reference_set, mean_reference, sample_references
from .data import Dataset
from .errors import ValidationError
from .inference import predict_blt, predict_marginalized, predict_single, select_candidates
from .models import build, predict_logits, spec_for
from .tensor import softmax
from .training import TrainingConfig, fit


def _images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim != 4:
        raise ValidationError(f"expected NCHW images, got shape {X.shape}")
    return X


class AnchoredClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained as standard, vanilla-anchored or reference-masked.

    ``X`` is a float array of shape (N, C, H, W). ``random_state`` seeds
    initialization, shuffling, reference draws and masking through separate
    offsets so the streams stay independent.
    """

    def __init__(self, method="proposed", alpha=0.25, mode="augment", schedule="periodic",
                 refset_size=None, refset_policy="class_balanced", model_kind="small_cnn",
                 hidden=None, epochs=15, batch_size=64, learning_rate=0.05, milestones=(10, 13),
                 gamma=0.1, momentum=0.9, weight_decay=5e-4, protocol="single", k=10,
                 blt_candidates=50, blt_criterion="max_confidence", random_state=0):
        self.method = method
        self.alpha = alpha
        self.mode = mode
        self.schedule = schedule
        self.refset_size = refset_size
        self.refset_policy = refset_policy
        self.model_kind = model_kind
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.milestones = milestones
        self.gamma = gamma
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.protocol = protocol
        self.k = k
        self.blt_candidates = blt_candidates
        self.blt_criterion = blt_criterion
        self.random_state = random_state

    def fit(self, X, y):
        if self.method not in ("standard", "vanilla", "proposed"):
            raise ValidationError(f"unknown method {self.method!r}")
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        if X.ndim != 4:
            raise ValidationError(f"expected NCHW images, got shape {X.shape}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        train = Dataset(X, codes, len(self.classes_), name="estimator")
        seed = int(self.random_state or 0)
        anchored = self.method != "standard"
        spec = spec_for(train.channels, train.hw, train.num_classes, kind=self.model_kind,
                        hidden=self.hidden, anchored=anchored, init_seed=seed)
        self.model_ = build(spec)
        self.reference_set_ = None
        masking = None
        if anchored:
            self.reference_set_ = build_reference_set(train, self.refset_size, self.refset_policy, seed + 3)
            alpha = 0.0 if self.method == "vanilla" else self.alpha
            masking = MaskingConfig(alpha, self.schedule, self.mode, seed + 4)
        cfg = TrainingConfig(self.epochs, self.batch_size, self.learning_rate, tuple(self.milestones),
                             self.gamma, self.momentum, self.weight_decay)
        result = fit(self.model_, train, cfg, ref_set=self.reference_set_, masking=masking,
                     data_seed=seed + 2, reference_seed=seed + 3, masking_seed=seed + 4)
        self.residual_store_ = result.residual_store
        self.trajectory_ = result.trajectory
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _result(self, X):
        check_is_fitted(self, "model_")
        X = _images(X)
        if self.reference_set_ is None:
            logits = predict_logits(self.model_, X)
            return softmax(logits), None
        seed = int(self.random_state or 0) + 6
        if self.protocol == "single":
            res = predict_single(self.model_, X, ref_set=self.reference_set_)
        elif self.protocol == "marginalized":
            res = predict_marginalized(self.model_, X, self.reference_set_, self.k, np.random.default_rng(seed))
        elif self.protocol == "blt":
            cands = select_candidates(self.reference_set_, self.blt_candidates, seed)
            res = predict_blt(self.model_, X, cands, self.blt_criterion, self.residual_store_)
        else:
            raise ValidationError(f"unknown protocol {self.protocol!r}")
        return res.probs, res

    def predict_proba(self, X) -> np.ndarray:
        return self._result(X)[0]

    def predict(self, X) -> np.ndarray:
        probs = self.predict_proba(X)
        return self.classes_[np.argmax(probs, axis=1)]

    def epistemic_std(self, X) -> np.ndarray:
        """Per-class spread of predictions over K references."""
        check_is_fitted(self, "model_")
        if self.reference_set_ is None:
            raise ValidationError("epistemic spread needs an anchored model")
        res = predict_marginalized(self.model_, _images(X), self.reference_set_, self.k,
                                   np.random.default_rng(int(self.random_state or 0) + 6))
        return res.epistemic_std


class AnchorTransformer(TransformerMixin, BaseEstimator):
    """Maps images to the channel stack [reference, image - reference].

    ``reference="mean"`` uses the reference-set mean for every row; ``"random"``
    draws one reference per row from a generator seeded by ``random_state``.
    """

    def __init__(self, refset_size=None, refset_policy="uniform_random", reference="mean", random_state=0):
        self.refset_size = refset_size
        self.refset_policy = refset_policy
        self.reference = reference
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _images(X)
        labels = np.zeros(X.shape[0], dtype=np.int64) if y is None else np.unique(y, return_inverse=True)[1]
        ds = Dataset(X, labels, int(labels.max()) + 1)
        self.reference_set_ = build_reference_set(ds, self.refset_size, self.refset_policy, int(self.random_state or 0))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "reference_set_")
        X = _images(X)
        if X.shape[1:] != self.reference_set_.samples.shape[1:]:
            raise ValidationError(f"images {X.shape[1:]} differ from fitted {self.reference_set_.samples.shape[1:]}")
        if self.reference == "mean":
            refs = mean_reference(self.reference_set_)
        elif self.reference == "random":
            refs = sample_references(self.reference_set_, X.shape[0], np.random.default_rng(self.random_state))
        else:
            raise ValidationError(f"reference must be mean or random, got {self.reference!r}")
        return anchor(X, refs).joint

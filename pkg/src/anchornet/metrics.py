"""Accuracy, calibration (binned and smoothed ECE), energy scores and AUROC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError
from .tensor import _lse


@dataclass
class CalibrationReport:
    binned_ece: float
    smoothed_ece: float | None
    bins: int
    bandwidth: float | None
    bin_accuracy: np.ndarray = field(repr=False)
    bin_confidence: np.ndarray = field(repr=False)
    bin_count: np.ndarray = field(repr=False)


@dataclass
class AnomalyReport:
    auroc: float
    id_scores: np.ndarray = field(repr=False)
    ood_scores: np.ndarray = field(repr=False)
    score_kind: str = "energy"


def _probs_labels(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValidationError(f"probs {probs.shape} and labels {labels.shape} disagree")
    return probs, labels


def top1_accuracy(probs, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    probs, labels = _probs_labels(probs, labels)
    if probs.shape[0] == 0:
        raise ValidationError("accuracy of an empty batch is undefined")
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def binned_ece(probs, labels, bins: int = 15) -> CalibrationReport:
    """Equal-width, right-inclusive bins on (0, 1] over the max-probability."""
    if bins < 1:
        raise ValidationError("bins must be >= 1")
    probs, labels = _probs_labels(probs, labels)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    # bin k covers (k/bins, (k+1)/bins]; confidence 0 falls into bin 0
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    count = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    nz = count > 0
    acc = np.where(nz, acc_sum / np.maximum(count, 1), 0.0)
    cbar = np.where(nz, conf_sum / np.maximum(count, 1), 0.0)
    n = conf.shape[0]
    ece = float(np.sum(count / n * np.abs(acc - cbar))) if n else 0.0
    return CalibrationReport(ece, None, bins, None, acc, cbar, count)


def smoothed_ece(probs, labels, bandwidth: float = 0.05, grid_points: int = 512) -> float:
    """Kernel-smoothed calibration error.

    Correctness is regressed on confidence with a Nadaraya-Watson estimator
    (Gaussian kernel reflected at 0 and 1), and ``|r(t) - t|`` is integrated
    against the reflected kernel density of the confidences on a uniform grid.
    This is one reproducible reading of the smooth ECE, not a port of a
    reference implementation.
    """
    if bandwidth <= 0:
        raise ValidationError("bandwidth must be positive")
    probs, labels = _probs_labels(probs, labels)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    t = np.linspace(0.0, 1.0, grid_points)
    num = np.zeros(grid_points)
    den = np.zeros(grid_points)
    chunk = 8192
    for s in range(0, conf.shape[0], chunk):
        f = conf[s : s + chunk]
        y = correct[s : s + chunk]
        k = np.zeros((grid_points, f.shape[0]))
        for centre in (f, -f, 2.0 - f):
            k += np.exp(-0.5 * ((t[:, None] - centre[None, :]) / bandwidth) ** 2)
        num += k @ y
        den += k.sum(axis=1)
    r = np.divide(num, den, out=np.full(grid_points, 0.0), where=den > 0)
    mass = np.trapezoid(den, t)
    if mass <= 0:
        return 0.0
    density = den / mass
    return float(np.trapezoid(np.abs(r - t) * density, t))


def calibration_report(probs, labels, bins: int = 15, bandwidth: float = 0.05) -> CalibrationReport:
    rep = binned_ece(probs, labels, bins)
    rep.smoothed_ece = smoothed_ece(probs, labels, bandwidth)
    rep.bandwidth = bandwidth
    return rep


def energy_score(logits, temperature: float = 1.0) -> np.ndarray:
    """Free energy ``-T * logsumexp(logits / T)``; lower means more in-distribution."""
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ValidationError(f"logits must be [N, C], got {z.shape}")
    return -temperature * _lse(z / temperature)


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney AUROC with OOD as the positive class; ties count one half."""
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
    n, m = id_scores.size, ood_scores.size
    if n == 0 or m == 0:
        raise ValidationError("auroc needs non-empty ID and OOD score sets")
    ranks = rankdata(np.concatenate([id_scores, ood_scores]))
    u = ranks[n:].sum() - m * (m + 1) / 2.0
    return float(u / (n * m))


def anomaly_report(id_logits, ood_logits, temperature: float = 1.0) -> AnomalyReport:
    ids = energy_score(id_logits, temperature)
    oods = energy_score(ood_logits, temperature)
    return AnomalyReport(auroc(ids, oods), ids, oods)

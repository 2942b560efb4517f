import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchornet.errors import ValidationError
from anchornet.metrics import (
    anomaly_report,
    auroc,
    binned_ece,
    calibration_report,
    energy_score,
    smoothed_ece,
    top1_accuracy,
)


def _two_class(conf, correct):
    """Probability rows whose max equals ``conf`` (>= 0.5); label chosen to be right or wrong."""
    conf = np.asarray(conf, dtype=float)
    probs = np.stack([conf, 1 - conf], axis=1)
    labels = np.where(correct, 0, 1)
    return probs, labels


def test_accuracy_examples():
    assert top1_accuracy(np.eye(4), np.arange(4)) == 1.0
    assert top1_accuracy(np.full((5, 3), 1 / 3), np.zeros(5)) == 1.0
    assert top1_accuracy(np.eye(4), [1, 1, 2, 3]) == 0.75
    with pytest.raises(ValidationError):
        top1_accuracy(np.zeros((0, 3)), [])
    with pytest.raises(ValidationError):
        top1_accuracy(np.eye(3), [0, 1])


def test_binned_ece_examples():
    assert binned_ece(np.eye(3), np.arange(3)).binned_ece == 0.0
    probs = np.tile([[1.0, 0.0]], (6, 1))
    assert binned_ece(probs, np.ones(6)).binned_ece == 1.0
    assert binned_ece(np.array([[1.0, 0.0]]), [0]).binned_ece == 0.0
    # confidence 0.75 with accuracy 3/4 in a single bin
    p, y = _two_class([0.75] * 4, [True, True, True, False])
    assert binned_ece(p, y).binned_ece == 0.0


def _loop_ece(conf, correct, bins):
    total = 0.0
    n = len(conf)
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        members = [i for i in range(n) if (lo < conf[i] <= hi) or (b == 0 and conf[i] == 0)]
        if members:
            acc = sum(correct[i] for i in members) / len(members)
            cb = sum(conf[i] for i in members) / len(members)
            total += len(members) / n * abs(acc - cb)
    return total


def test_binned_ece_loop_oracle(rng):
    for _ in range(20):
        n, c = int(rng.integers(1, 200)), int(rng.integers(2, 6))
        logits = rng.standard_normal((n, c)) * 3
        probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        labels = rng.integers(0, c, n)
        rep = binned_ece(probs, labels, 15)
        conf = probs.max(1)
        correct = (probs.argmax(1) == labels).astype(float)
        assert abs(rep.binned_ece - _loop_ece(conf, correct, 15)) <= 1e-12
        assert rep.bin_count.sum() == n
        weighted = np.sum(rep.bin_count / n * np.abs(rep.bin_accuracy - rep.bin_confidence))
        assert abs(weighted - rep.binned_ece) <= 1e-15
        assert 0.0 <= rep.binned_ece <= 1.0


def test_bin_edges_are_right_inclusive():
    p, y = _two_class([2 / 3, 2 / 3 + 1e-9], [True, True])
    rep = binned_ece(p, y, bins=3)
    assert rep.bin_count.tolist() == [0, 1, 1]


def test_smoothed_ece_calibrated_predictor():
    rng = np.random.default_rng(0)
    conf = rng.uniform(0.5, 1.0, 100_000)
    p, y = _two_class(conf, rng.random(100_000) < conf)
    assert smoothed_ece(p, y) < 0.02


def test_smoothed_ece_constant_overconfidence():
    p, y = _two_class(np.full(10_000, 0.9), np.arange(10_000) % 2 == 0)
    assert abs(smoothed_ece(p, y) - 0.4) < 0.02


def test_smoothed_ece_monotone_in_shift():
    rng = np.random.default_rng(1)
    conf = rng.uniform(0.5, 0.8, 20_000)
    correct = rng.random(20_000) < conf
    base = smoothed_ece(*_two_class(conf, correct))
    shifted = smoothed_ece(*_two_class(np.clip(conf + 0.2, 0, 1), correct))
    assert shifted > base
    with pytest.raises(ValidationError):
        smoothed_ece(*_two_class(conf, correct), bandwidth=0)


def test_calibration_report_fields():
    p, y = _two_class([0.6, 0.9, 0.7], [True, False, True])
    rep = calibration_report(p, y, bins=10, bandwidth=0.1)
    assert rep.bandwidth == 0.1 and rep.bins == 10 and rep.smoothed_ece is not None
    assert 0 <= rep.smoothed_ece <= 1


def test_energy_examples():
    assert energy_score(np.zeros((1, 2)))[0] == -math.log(2)
    with pytest.raises(ValidationError):
        energy_score(np.zeros((1, 2)), temperature=0)
    with pytest.raises(ValidationError):
        energy_score(np.zeros(3))


def test_energy_against_mpmath(rng):
    z = rng.standard_normal((30, 7)) * 40
    for t in (0.5, 1.0, 3.0):
        got = energy_score(z, t)
        for i in range(30):
            exact = -t * mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v)) / t) for v in z[i]))
            assert abs(got[i] - float(exact)) <= 1e-12 * max(1.0, abs(float(exact)))


def test_energy_monotone_in_max_logit(rng):
    z = rng.standard_normal((1, 5))
    k = int(np.argmax(z))
    vals = []
    for bump in np.linspace(0, 5, 11):
        w = z.copy()
        w[0, k] += bump
        vals.append(energy_score(w)[0])
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_energy_temperature_rescaling(rng):
    z = rng.standard_normal((50, 4))
    assert np.array_equal(np.argsort(energy_score(z * 2.0, 2.0)), np.argsort(energy_score(z, 1.0)))


def test_auroc_examples():
    assert auroc([0, 1], [2, 3]) == 1.0
    assert auroc([1, 1, 1], [1, 1]) == 0.5
    assert auroc([2, 3], [0, 1]) == 0.0
    with pytest.raises(ValidationError):
        auroc([], [1.0])


def _pairs_oracle(a, b):
    total = Fraction(0)
    for x in a:
        for y in b:
            total += 1 if y > x else Fraction(1, 2) if y == x else 0
    return total / (len(a) * len(b))


def test_auroc_all_pairs_oracle(rng):
    a = rng.integers(0, 20, 100).astype(float)
    b = rng.integers(0, 20, 100).astype(float)
    assert auroc(a, b) == float(_pairs_oracle(a, b))


scores = st.lists(st.integers(-50, 50).map(float), min_size=1, max_size=30)


@settings(max_examples=100)
@given(scores, scores)
def test_auroc_symmetry_and_monotone_invariance(a, b):
    assert auroc(a, b) + auroc(b, a) == 1.0
    f = lambda v: np.exp(np.asarray(v) / 10.0) * 3 + 1  # noqa: E731
    assert auroc(f(a), f(b)) == auroc(a, b)


def test_anomaly_report_uses_energy(rng):
    ood = rng.standard_normal((40, 3))
    ind = rng.standard_normal((60, 3)) + np.array([6.0, 0, 0])
    rep = anomaly_report(ind, ood)
    assert rep.score_kind == "energy"
    assert rep.auroc == auroc(rep.id_scores, rep.ood_scores)
    assert rep.auroc > 0.9

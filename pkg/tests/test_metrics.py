import math

import numpy as np
import pytest

from covidcap.data import EvalGroup
from covidcap.metrics import (
    auc,
    confusion_metrics,
    dice,
    dual_weight,
    fuse,
    groupwise_report,
    paired_t_test,
)


def brute_force_auc(scores, labels) -> float:
    """Pairwise concordance: P(random positive outscores random negative),
    ties counting one half.  Quadratic, for cross-checking only."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def t_sf_quadrature(t_value: float, df: int) -> float:
    """P(T > t) for Student's t via direct numerical integration of the
    density (independent of any library t distribution)."""
    # log normalizer: Gamma((df+1)/2) / (sqrt(df*pi) * Gamma(df/2))
    log_norm = (
        math.lgamma((df + 1) / 2.0)
        - math.lgamma(df / 2.0)
        - 0.5 * math.log(df * math.pi)
    )

    def density(x):
        return np.exp(log_norm - ((df + 1) / 2.0) * np.log1p(x * x / df))

    # integrate from t to a far cutoff; tails decay polynomially, so push far
    # and substitute x = t + u/(1-u) to compress [t, inf) into [0, 1)
    u = np.linspace(0.0, 1.0 - 1e-9, 200_001)
    x = t_value + u / (1.0 - u)
    jac = 1.0 / (1.0 - u) ** 2
    return float(np.trapezoid(density(x) * jac, u))


class TestAuc:
    def test_perfect_separation(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_perfectly_wrong(self):
        assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_all_tied_is_half(self):
        assert auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_hand_case_with_tie(self):
        # pairs: (0.8>0.4)=1, (0.8>0.6)=1, (0.6=0.6)=0.5, (0.6>0.4)=1 -> 3.5/4
        assert auc([0.4, 0.6, 0.6, 0.8], [0, 0, 1, 1]) == pytest.approx(0.875)

    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(2024)
        for trial in range(100):
            n = int(rng.integers(2, 13))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            # quantized scores force plenty of ties
            scores = rng.integers(0, 5, size=n) / 4.0
            assert auc(scores, labels) == pytest.approx(
                brute_force_auc(scores, labels), abs=1e-12
            ), f"trial {trial}: scores={scores}, labels={labels}"

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            auc([0.1, 0.9], [1, 1])

    def test_bad_inputs_rejected(self):
        with pytest.raises(ValueError):
            auc([0.1, np.nan], [0, 1])
        with pytest.raises(ValueError):
            auc([0.1, 0.9], [0, 2])
        with pytest.raises(ValueError):
            auc([], [])


class TestConfusionMetrics:
    def test_hand_counts(self):
        scores = [0.9, 0.6, 0.4, 0.2, 0.7, 0.1]
        labels = [1, 1, 1, 0, 0, 0]
        rep = confusion_metrics(scores, labels)
        assert (rep.tp, rep.fn, rep.fp, rep.tn) == (2, 1, 1, 2)
        assert rep.accuracy == pytest.approx(4 / 6)
        assert rep.sensitivity == pytest.approx(2 / 3)
        assert rep.specificity == pytest.approx(2 / 3)
        assert rep.f1 == pytest.approx(2 * 2 / (2 * 2 + 1 + 1))
        assert rep.n == 6

    def test_threshold_is_inclusive(self):
        rep = confusion_metrics([0.5], [1])
        assert rep.tp == 1 and rep.fn == 0

    def test_single_class_gives_none_auc(self):
        rep = confusion_metrics([0.9, 0.2], [1, 1])
        assert rep.auc is None
        assert rep.sensitivity == pytest.approx(0.5)
        assert rep.specificity is None  # no negatives

    def test_f1_none_when_undefined(self):
        # no positives anywhere: 2TP+FP+FN == 0
        rep = confusion_metrics([0.1, 0.2], [0, 0])
        assert rep.f1 is None

    def test_to_dict_round_trip_keys(self):
        rep = confusion_metrics([0.9, 0.1], [1, 0])
        d = rep.to_dict()
        assert set(d) == {
            "n", "auc", "accuracy", "sensitivity", "specificity", "f1",
            "tp", "fp", "tn", "fn",
        }
        assert d["auc"] == 1.0


class TestGroupwiseReport:
    def test_bands_split_and_empty_band_is_none(self):
        scores = [0.9, 0.1, 0.8, 0.3]
        labels = [1, 0, 1, 0]
        ratios = [0.001, 0.004, 0.010, 0.020]  # low, low, mid, mid
        rep = groupwise_report(scores, labels, ratios)
        assert rep[EvalGroup.LOW].n == 2
        assert rep[EvalGroup.MID].n == 2
        assert rep[EvalGroup.HIGH] is None
        assert rep[EvalGroup.LOW].auc == 1.0

    def test_band_boundaries(self):
        # 0.005 and 0.030 belong to MID, just above 0.030 to HIGH
        rep = groupwise_report([0.5, 0.5, 0.5], [1, 0, 1], [0.005, 0.030, 0.0300001])
        assert rep[EvalGroup.LOW] is None
        assert rep[EvalGroup.MID].n == 2
        assert rep[EvalGroup.HIGH].n == 1

    def test_ratio_shape_mismatch(self):
        with pytest.raises(ValueError):
            groupwise_report([0.5], [1], [0.1, 0.2])


class TestDualWeightAndFuse:
    def test_weight_bands(self):
        assert dual_weight(0.0) == 0.35
        assert dual_weight(0.0009) == 0.35
        assert dual_weight(0.001) == 0.96  # boundary belongs to the middle
        assert dual_weight(0.010) == 0.96
        assert dual_weight(0.030) == 0.96  # boundary belongs to the middle
        assert dual_weight(0.0301) == 0.35
        assert dual_weight(1.0) == 0.35

    def test_weight_rejects_bad_ratio(self):
        with pytest.raises(ValueError):
            dual_weight(-0.1)
        with pytest.raises(ValueError):
            dual_weight(float("nan"))

    def test_fuse_hand_values(self):
        assert fuse(0.8, 0.2, 0.35) == pytest.approx(0.35 * 0.8 + 0.65 * 0.2, abs=1e-15)
        assert fuse(0.8, 0.2, 0.96) == pytest.approx(0.96 * 0.8 + 0.04 * 0.2, abs=1e-15)
        assert fuse(0.5, 0.5, 0.5) == 0.5

    def test_fuse_extremes_are_identity(self):
        assert fuse(0.7, 0.3, 1.0) == 0.7
        assert fuse(0.7, 0.3, 0.0) == 0.3

    def test_fuse_validates_inputs(self):
        with pytest.raises(ValueError):
            fuse(1.2, 0.5, 0.5)
        with pytest.raises(ValueError):
            fuse(0.5, -0.1, 0.5)
        with pytest.raises(ValueError):
            fuse(0.5, 0.5, 1.5)


class TestPairedTTest:
    def test_identical_sequences_give_one(self):
        assert paired_t_test([0.5, 0.6, 0.7], [0.5, 0.6, 0.7]) == 1.0

    def test_constant_nonzero_difference_gives_zero(self):
        assert paired_t_test([1.0, 1.0, 1.0], [0.0, 0.0, 0.0]) == 0.0

    def test_symmetry(self):
        a = [0.1, 0.5, 0.9, 0.3]
        b = [0.2, 0.4, 0.7, 0.5]
        assert paired_t_test(a, b) == pytest.approx(paired_t_test(b, a), abs=1e-15)

    def test_matches_quadrature_tail(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            n = int(rng.integers(3, 12))
            a = rng.normal(0.2, 1.0, size=n)
            b = rng.normal(0.0, 1.0, size=n)
            d = a - b
            t_value = d.mean() / (d.std(ddof=1) / math.sqrt(n))
            expected = 2.0 * t_sf_quadrature(abs(t_value), n - 1)
            assert paired_t_test(a, b) == pytest.approx(expected, rel=1e-6)

    def test_requires_two_pairs(self):
        with pytest.raises(ValueError):
            paired_t_test([1.0], [0.5])

    def test_requires_matching_shapes(self):
        with pytest.raises(ValueError):
            paired_t_test([1.0, 2.0], [0.5])


class TestDice:
    def test_disjoint_is_zero(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, 0] = True
        b[3, 3] = True
        assert dice(a, b) == 0.0

    def test_identical_is_one(self):
        a = np.random.default_rng(0).uniform(size=(5, 5)) > 0.5
        assert dice(a, a) == 1.0

    def test_hand_case(self):
        a = np.array([1, 1, 0, 0])
        b = np.array([1, 0, 1, 0])
        assert dice(a, b) == pytest.approx(2 * 1 / (2 + 2))

    def test_both_empty_is_one(self):
        assert dice(np.zeros(3), np.zeros(3)) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros(3), np.zeros(4))

import math

import numpy as np
import pytest
import torch

from covidcap.losses import (
    attention_loss,
    batch_objective,
    classification_loss,
    total_loss,
)


class TestClassificationLoss:
    def test_logit_zero_is_ln2_for_both_labels(self):
        for label in (0.0, 1.0):
            assert float(classification_loss(0.0, label)) == pytest.approx(
                math.log(2.0), abs=1e-12
            )

    def test_saturated_correct_prediction(self):
        assert float(classification_loss(20.0, 1.0)) < 1e-8
        assert float(classification_loss(-20.0, 0.0)) < 1e-8

    def test_half_logit_positive_label(self):
        expected = math.log(1.0 + math.exp(-0.5))  # 0.474077...
        assert float(classification_loss(0.5, 1.0)) == pytest.approx(expected, abs=1e-12)

    def test_stable_at_extreme_logits(self):
        assert math.isfinite(float(classification_loss(500.0, 0.0)))
        assert float(classification_loss(-500.0, 1.0)) == pytest.approx(500.0, rel=1e-9)

    def test_convex_in_logit(self):
        # midpoint value never exceeds the chord, spot-checked on a grid
        for label in (0.0, 1.0):
            for a, b in [(-3.0, 1.0), (-0.5, 2.0), (0.1, 4.0)]:
                fa = float(classification_loss(a, label))
                fb = float(classification_loss(b, label))
                fm = float(classification_loss((a + b) / 2, label))
                assert fm <= (fa + fb) / 2 + 1e-12

    def test_batchwise_matches_elementwise(self):
        logits = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
        labels = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
        batch = classification_loss(logits, labels)
        for i in range(3):
            assert float(batch[i]) == pytest.approx(
                float(classification_loss(float(logits[i]), float(labels[i]))), abs=1e-12
            )


class TestAttentionLoss:
    def test_exact_match_scores_zero(self):
        m = torch.zeros((4, 4, 4), dtype=torch.float64)
        m[1, 2, 3] = 1.0
        assert float(attention_loss(m, m)) == 0.0

    def test_maximal_mismatch_saturates_to_one(self):
        t = np.ones((4, 4, 4))
        m = np.zeros((4, 4, 4))
        assert float(attention_loss(t, m)) == pytest.approx(1.0, abs=1e-9)

    def test_two_voxel_hand_case(self):
        t = np.array([0.5, 0.0]).reshape(1, 1, 2)
        m = np.array([1.0, 0.0]).reshape(1, 1, 2)
        assert float(attention_loss(t, m)) == pytest.approx(1.0 / 6.0, abs=1e-9)

    def test_both_empty_scores_zero(self):
        z = np.zeros((3, 3, 3))
        assert float(attention_loss(z, z)) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            attention_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    def test_bounded_on_random_inputs(self):
        rng = np.random.default_rng(123)
        for _ in range(50):
            t = rng.uniform(0, 1, size=(5, 5, 5))
            m = (rng.uniform(0, 1, size=(5, 5, 5)) > 0.7).astype(float)
            value = float(attention_loss(t, m))
            assert 0.0 <= value <= 1.0

    def test_batched_reduction_matches_per_sample(self):
        rng = np.random.default_rng(5)
        t = rng.uniform(0, 1, size=(3, 4, 4, 4))
        m = (rng.uniform(0, 1, size=(3, 4, 4, 4)) > 0.6).astype(float)
        batched = attention_loss(t, m)
        assert batched.shape == (3,)
        for i in range(3):
            assert float(batched[i]) == pytest.approx(
                float(attention_loss(t[i], m[i])), abs=1e-12
            )


class TestTotalLoss:
    def test_covid_adds_weighted_attention_term(self):
        assert float(total_loss(0.7, 0.2, 1)) == pytest.approx(0.8, abs=1e-12)

    def test_cap_uses_classification_only(self):
        assert float(total_loss(0.7, 0.2, 0)) == pytest.approx(0.7, abs=1e-12)

    def test_zero_weight_degenerates(self):
        assert float(total_loss(1.3, 0.9, 1, weight=0.0)) == pytest.approx(1.3, abs=1e-12)

    def test_missing_attention_term_for_covid_rejected(self):
        with pytest.raises(ValueError):
            total_loss(torch.tensor([0.5]), None, torch.tensor([1.0]))
        # ...but fine for a CAP-only batch
        out = total_loss(torch.tensor([0.5]), None, torch.tensor([0.0]))
        assert float(out[0]) == pytest.approx(0.5)


class TestBatchObjective:
    def test_mean_over_batch_and_covid_only_attention(self):
        logits = torch.tensor([0.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        labels = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
        attn = torch.tensor([0.4, 0.2, 9.0, 9.0], dtype=torch.float64)  # CAP entries ignored
        objective, breakdown = batch_objective(logits, labels, attn, weight=0.5)
        assert breakdown.classification == pytest.approx(math.log(2), abs=1e-12)
        assert breakdown.attention == pytest.approx(0.3, abs=1e-12)
        assert float(objective) == pytest.approx(math.log(2) + 0.5 * 0.3, abs=1e-12)
        assert breakdown.total == pytest.approx(float(objective), abs=1e-12)

    def test_cap_only_batch_has_no_attention_term(self):
        logits = torch.tensor([0.2, -0.1])
        labels = torch.tensor([0.0, 0.0])
        objective, breakdown = batch_objective(logits, labels, None, weight=0.5)
        assert breakdown.attention is None
        assert float(objective) == pytest.approx(breakdown.classification, abs=1e-6)

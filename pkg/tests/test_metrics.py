import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgfuse.metrics import ConfusionMatrix, aggregate, iou

from oracles import confusion_oracle, iou_oracle


class TestUpdate:
    def test_hand_counting(self):
        cm = ConfusionMatrix(2)
        cm.update(np.array([0, 0, 1]), np.array([0, 1, 1]))
        assert cm.counts[0, 0] == 1 and cm.counts[0, 1] == 1 and cm.counts[1, 1] == 1
        assert cm.counts[1, 0] == 0

    def test_empty_mask_no_change(self):
        cm = ConfusionMatrix(3)
        cm.update(np.array([0, 1]), np.array([0, 1]), mask=np.array([False, False]))
        assert cm.total() == 0

    def test_perfect_predictions_diagonal(self):
        cm = ConfusionMatrix(4)
        labels = np.array([0, 1, 2, 3, 2, 1])
        cm.update(labels, labels)
        assert np.all(cm.counts == np.diag(np.diag(cm.counts)))
        assert cm.total() == 6

    def test_out_of_range_rejected(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(ValueError, match=r"\[0, 2\)"):
            cm.update(np.array([2]), np.array([0]))
        with pytest.raises(ValueError):
            cm.update(np.array([0]), np.array([-1]))

    @given(seed=st.integers(0, 1000), split=st.integers(1, 19))
    @settings(max_examples=30, deadline=None)
    def test_additive_over_batches(self, seed, split):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 4, size=20)
        preds = rng.integers(0, 4, size=20)
        whole = ConfusionMatrix(4).update(labels, preds)
        part = ConfusionMatrix(4).update(labels[:split], preds[:split])
        part.merge(ConfusionMatrix(4).update(labels[split:], preds[split:]))
        np.testing.assert_array_equal(whole.counts, part.counts)


class TestIou:
    def test_diagonal_is_perfect(self):
        cm = ConfusionMatrix(3, counts=np.diag([5, 2, 7]))
        res = iou(cm)
        np.testing.assert_array_equal(res.per_class, 1.0)
        assert res.miou == 1.0 and res.excluded == []

    def test_hand_arithmetic(self):
        cm = ConfusionMatrix(2, counts=np.array([[1, 1], [0, 1]]))
        res = iou(cm)
        assert res.per_class == pytest.approx([0.5, 0.5])
        assert res.miou == pytest.approx(0.5)

    def test_absent_class_excluded_and_flagged(self):
        cm = ConfusionMatrix(3, counts=np.array([[2, 0, 0], [1, 1, 0], [0, 0, 0]]))
        res = iou(cm)
        assert res.excluded == [2]
        assert np.isnan(res.per_class[2])
        assert res.miou == pytest.approx((2 / 3 + 1 / 2) / 2)

    @given(seed=st.integers(0, 500))
    @settings(max_examples=50, deadline=None)
    def test_matches_hand_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        labels = rng.integers(0, k, size=n)
        preds = rng.integers(0, k, size=n)
        cm = ConfusionMatrix(k).update(labels, preds)
        ref_cm = confusion_oracle(labels, preds, k)
        np.testing.assert_array_equal(cm.counts, ref_cm)
        per_class, miou = iou_oracle(ref_cm)
        res = iou(cm)
        for mine, ref in zip(res.per_class, per_class):
            if ref is None:
                assert np.isnan(mine)
            else:
                assert mine == ref
        assert res.miou == miou

    @given(seed=st.integers(0, 500))
    @settings(max_examples=25, deadline=None)
    def test_permutation_covariant(self, seed):
        rng = np.random.default_rng(seed)
        k = 4
        labels = rng.integers(0, k, size=50)
        preds = rng.integers(0, k, size=50)
        perm = rng.permutation(k)
        base = iou(ConfusionMatrix(k).update(labels, preds))
        relabeled = iou(ConfusionMatrix(k).update(perm[labels], perm[preds]))
        np.testing.assert_allclose(relabeled.per_class[perm], base.per_class)
        assert relabeled.miou == pytest.approx(base.miou, nan_ok=True)


class TestAggregate:
    def test_identical_inputs_unchanged(self, rng):
        p = rng.dirichlet(np.ones(3), size=10)
        mean, pred = aggregate(p, p)
        np.testing.assert_allclose(mean, p)
        np.testing.assert_array_equal(pred, p.argmax(axis=1))

    def test_tie_breaks_low_index(self):
        mean, pred = aggregate(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
        np.testing.assert_allclose(mean, [[0.5, 0.5]])
        assert pred[0] == 0

    def test_scalar_oracle(self):
        mean, pred = aggregate(np.array([[0.8, 0.2]]), np.array([[0.4, 0.6]]))
        np.testing.assert_allclose(mean, [[0.6, 0.4]])
        assert pred[0] == 0

    def test_rejects_non_distribution(self):
        with pytest.raises(ValueError, match="sum to 1"):
            aggregate(np.array([[0.9, 0.2]]), np.array([[0.5, 0.5]]))

    @given(seed=st.integers(0, 300))
    @settings(max_examples=40, deadline=None)
    def test_preserves_simplex(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.dirichlet(np.ones(5), size=16)
        b = rng.dirichlet(np.ones(5), size=16)
        mean, _ = aggregate(a, b)
        assert np.all(mean >= 0) and np.all(mean <= 1)
        np.testing.assert_allclose(mean.sum(axis=1), 1.0, atol=1e-12)

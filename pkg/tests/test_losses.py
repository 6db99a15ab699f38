"""Loss functions, greedy query matching, and the adaptive-moment optimizer."""
import numpy as np
import pytest

import naslora.autodiff as tz
from naslora.autodiff import GradTape, Tensor, backward, tensor
from naslora.errors import NonFiniteError, ShapeError, ValueCheckError
from naslora.losses import (
    bce_loss,
    cls_loss,
    dice_loss,
    match_queries,
    segmentation_loss,
    soft_iou,
    total_loss,
)
from naslora.optim import AdamState, adam_step, zero_grads


def bce_oracle(p, y):
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()


def cls_oracle(logits, idx):
    total = 0.0
    rows = logits.reshape(-1, logits.shape[-1])
    flat = idx.reshape(-1)
    for r, t in zip(rows, flat):
        z = r - r.max()
        total += -(z[t] - np.log(np.exp(z).sum()))
    return total / len(flat)


class TestBce:
    def test_half_probability_gives_ln2(self):
        p = tensor(np.full((2, 5, 5), 0.5))
        y = np.random.default_rng(0).integers(0, 2, size=(2, 5, 5)).astype(float)
        np.testing.assert_allclose(bce_loss(p, y).item(), np.log(2), rtol=1e-12)

    def test_perfect_prediction_near_zero(self):
        y = np.random.default_rng(1).integers(0, 2, size=(3, 4, 4)).astype(float)
        loss = bce_loss(tensor(y), y).item()
        assert 0 <= loss <= 1e-6 * abs(np.log(1e-7))

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0, 1, size=(2, 6, 6))
        y = rng.integers(0, 2, size=(2, 6, 6)).astype(float)
        np.testing.assert_allclose(bce_loss(tensor(p), y).item(),
                                   bce_oracle(p, y), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss(tensor(np.zeros((2, 3))), np.zeros((3, 2)))

    def test_gradient(self):
        rng = np.random.default_rng(3)
        y = rng.integers(0, 2, size=(3, 3)).astype(float)
        p = tensor(rng.uniform(0.2, 0.8, size=(3, 3)), requires_grad=True)
        assert tz.grad_check(lambda t: bce_loss(t, y), p) <= 1e-6


class TestDice:
    def test_perfect_overlap_near_zero(self):
        y = np.ones((4, 4))
        assert dice_loss(tensor(y), y).item() == pytest.approx(0.0, abs=1e-7)

    def test_empty_masks_exactly_zero(self):
        y = np.zeros((4, 4))
        assert dice_loss(tensor(y), y).item() == 0.0

    def test_disjoint_masks_near_one(self):
        p = np.zeros((4, 4)); p[:2] = 1.0
        y = np.zeros((4, 4)); y[2:] = 1.0
        assert dice_loss(tensor(p), y).item() == pytest.approx(1.0, abs=1e-6)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        y = rng.integers(0, 2, size=(4, 4)).astype(float)
        p = tensor(rng.uniform(0.1, 0.9, size=(4, 4)), requires_grad=True)
        assert tz.grad_check(lambda t: dice_loss(t, y), p) <= 1e-6


class TestClsLoss:
    def test_uniform_logits_give_ln_k1(self):
        logits = tensor(np.zeros((2, 3, 4)))
        idx = np.random.default_rng(5).integers(0, 4, size=(2, 3))
        np.testing.assert_allclose(cls_loss(logits, idx).item(), np.log(4),
                                   rtol=1e-12)

    def test_saturated_correct_logits_near_zero(self):
        idx = np.array([[0, 2], [1, 1]])
        logits = np.full((2, 2, 3), -50.0)
        for i in range(2):
            for j in range(2):
                logits[i, j, idx[i, j]] = 50.0
        assert cls_loss(tensor(logits), idx).item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_per_query_oracle(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(3, 4, 5))
        idx = rng.integers(0, 5, size=(3, 4))
        np.testing.assert_allclose(cls_loss(tensor(logits), idx).item(),
                                   cls_oracle(logits, idx), rtol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueCheckError):
            cls_loss(tensor(np.zeros((1, 2, 3))), np.array([[0, 3]]))

    def test_gradient(self):
        rng = np.random.default_rng(7)
        idx = rng.integers(0, 4, size=(2, 3))
        x = tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        assert tz.grad_check(lambda t: cls_loss(t, idx), x) <= 1e-6


class TestTotalLoss:
    def test_default_weights_arithmetic(self):
        got = total_loss(tensor(0.3), tensor(0.2), tensor(0.1))
        assert got.item() == pytest.approx(0.7, abs=1e-15)

    def test_cls_weight_zero_drops_term(self):
        got = total_loss(tensor(0.3), tensor(0.2), tensor(9.9), lambda_cls=0.0)
        assert got.item() == pytest.approx(0.5, abs=1e-15)

    def test_gradient_is_weighted_sum_of_component_gradients(self):
        rng = np.random.default_rng(8)
        s = 6
        labels = np.zeros((1, s, s), dtype=int)
        labels[0, 1:4, 1:4] = 1
        ml = tensor(rng.normal(size=(1, 2, s, s)), requires_grad=True)
        cl = rng.normal(size=(1, 2, 2))

        grads = []
        for pick in ("bce", "dice", "cls", "total"):
            ml.grad = None
            with GradTape() as tape:
                bce, dice, tgt = segmentation_loss(ml, labels, num_classes=1)
                cls = cls_loss(tensor(cl), tgt)
                comp = {"bce": bce, "dice": dice, "cls": cls,
                        "total": total_loss(bce, dice, cls, 1.0, 2.0)}[pick]
            backward(comp, tape=tape)
            grads.append(np.zeros_like(ml.data) if ml.grad is None else ml.grad.copy())
        want = 1.0 * (grads[0] + grads[1]) + 2.0 * grads[2]
        np.testing.assert_allclose(grads[3], want, rtol=1e-10, atol=1e-12)


class TestMatching:
    def test_greedy_highest_iou_claims(self):
        s = 4
        labels = np.zeros((1, s, s), dtype=int)
        labels[0, :2, :] = 1      # class 1: top half
        labels[0, 2:, :2] = 2     # class 2: bottom-left
        probs = np.full((1, 3, s, s), 0.01)
        probs[0, 2, :2, :] = 0.99     # query 2 covers class 1
        probs[0, 0, 2:, :2] = 0.99    # query 0 covers class 2
        matches = match_queries(probs, labels, num_classes=2)
        assert matches[0] == [(2, 1), (0, 2)]

    def test_tie_breaks_to_lowest_query(self):
        s = 4
        labels = np.zeros((1, s, s), dtype=int)
        labels[0, :2] = 1
        probs = np.full((1, 3, s, s), 0.5)   # all queries identical
        matches = match_queries(probs, labels, num_classes=1)
        assert matches[0] == [(0, 1)]

    def test_absent_class_gets_no_pair(self):
        labels = np.zeros((1, 4, 4), dtype=int)
        probs = np.full((1, 2, 4, 4), 0.5)
        assert match_queries(probs, labels, num_classes=3) == [[]]

    def test_soft_iou_bounds(self):
        rng = np.random.default_rng(9)
        p = rng.uniform(0, 1, size=(5, 5))
        m = rng.integers(0, 2, size=(5, 5)).astype(float)
        v = soft_iou(p, m)
        assert 0.0 <= v <= 1.0
        assert soft_iou(m, m) == pytest.approx(1.0)


class TestSegmentationLoss:
    def test_perfect_prediction(self):
        s = 8
        labels = np.zeros((2, s, s), dtype=int)
        labels[0, :4] = 1
        labels[1, 2:5, 2:5] = 1
        logits = np.where(labels[:, None] == 1, 50.0, -50.0) * np.ones((2, 3, s, s))
        bce, dice, tgt = segmentation_loss(tensor(logits), labels, num_classes=1)
        assert bce.item() < 1e-6 and dice.item() < 1e-3
        # every batch element matched exactly one query to class 1
        assert ((tgt == 0).sum(axis=1) == 1).all()
        assert (tgt[tgt != 0] == 1).all()

    def test_no_targets_gives_zero_constants(self):
        labels = np.zeros((1, 4, 4), dtype=int)
        logits = tensor(np.random.default_rng(10).normal(size=(1, 2, 4, 4)))
        bce, dice, tgt = segmentation_loss(logits, labels, num_classes=1)
        assert bce.item() == 0.0 and dice.item() == 0.0
        assert (tgt == 1).all()

    def test_dice_is_mean_over_matched_pairs(self):
        rng = np.random.default_rng(11)
        s = 6
        labels = np.zeros((2, s, s), dtype=int)
        labels[0, :3] = 1
        labels[1, 3:] = 1
        logits = tensor(rng.normal(size=(2, 2, s, s)))
        _, dice, _ = segmentation_loss(logits, labels, num_classes=1)
        probs = 1 / (1 + np.exp(-logits.data))
        matches = match_queries(probs, labels, num_classes=1)
        per_pair = []
        for i, assigned in enumerate(matches):
            for q, c in assigned:
                y = (labels[i] == c).astype(float)
                per_pair.append(dice_loss(tensor(probs[i, q]), y).item())
        np.testing.assert_allclose(dice.item(), np.mean(per_pair), rtol=1e-12)

    def test_gradient_through_matched_masks(self):
        rng = np.random.default_rng(12)
        s = 6
        labels = np.zeros((1, s, s), dtype=int)
        labels[0, 1:4, 2:5] = 1
        ml = tensor(rng.normal(size=(1, 2, s, s)), requires_grad=True)

        def f(t):
            bce, dice, _ = segmentation_loss(t, labels, num_classes=1)
            return tz.add(bce, dice)

        assert tz.grad_check(f, ml, coords=[(0, 0, 1, 2), (0, 1, 3, 3),
                                            (0, 0, 0, 0)]) <= 1e-4


class TestAdam:
    def test_first_step_magnitude(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([1.0])
        st = AdamState()
        adam_step(st, {"p": p}, lr=0.1, wd=0.0)
        np.testing.assert_allclose(p.data[0], 2.0 - 0.1 / (1 + 1e-8), rtol=1e-15)
        assert st.step_count == 1
        assert st.m["p"].shape == (1,)

    def test_zero_gradient_leaves_parameter(self):
        p = Tensor(np.array([3.0, -1.0]), requires_grad=True)
        p.grad = np.zeros(2)
        adam_step(AdamState(), {"p": p}, lr=0.1, wd=0.0)
        np.testing.assert_array_equal(p.data, [3.0, -1.0])

    def test_decay_only_shrink(self):
        p = Tensor(np.array([4.0]), requires_grad=True)
        p.grad = np.zeros(1)
        adam_step(AdamState(), {"p": p}, lr=0.1, wd=0.5)
        np.testing.assert_allclose(p.data[0], 4.0 * (1 - 0.1 * 0.5), rtol=1e-15)

    def test_decay_applies_before_moment_update(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([1.0])
        adam_step(AdamState(), {"p": p}, lr=0.1, wd=0.5)
        want = 2.0 * (1 - 0.05) - 0.1 / (1 + 1e-8)
        np.testing.assert_allclose(p.data[0], want, rtol=1e-15)

    def test_missing_gradient_is_skipped(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        st = AdamState()
        adam_step(st, {"p": p}, lr=0.1, wd=0.9)
        np.testing.assert_array_equal(p.data, [1.0])
        assert "p" not in st.m

    def test_nan_gradient_aborts_with_name(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(NonFiniteError, match="badparam"):
            adam_step(AdamState(), {"badparam": p}, lr=0.1)

    def test_zero_grads_helper(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.ones(1)
        zero_grads({"p": p})
        assert p.grad is None

    def test_converges_on_quadratic(self):
        # sanity: minimizes (p - 3)^2 with persistent state
        p = Tensor(np.array([0.0]), requires_grad=True)
        st = AdamState()
        for _ in range(2000):
            p.grad = 2 * (p.data - 3.0)
            adam_step(st, {"p": p}, lr=0.05)
        assert abs(p.data[0] - 3.0) < 1e-3

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from incdet.losses import (
    NO_OBJECT,
    box_loss,
    focal_loss_matrix,
    kl_class_distill,
    masked_feature_distill,
    sigmoid_focal_loss,
)

logit_vectors = st.lists(st.floats(-8, 8), min_size=1, max_size=8).map(
    lambda xs: torch.tensor(xs, dtype=torch.float64)
)


def central_difference_grad(f, x: torch.Tensor, step: float = 1e-6) -> torch.Tensor:
    """Test-side finite-difference oracle, independent of autograd."""
    flat = x.detach().clone().reshape(-1)
    grad = torch.zeros_like(flat)
    for k in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[k] += step
        minus[k] -= step
        grad[k] = (float(f(plus.reshape(x.shape))) - float(f(minus.reshape(x.shape)))) / (2 * step)
    return grad.reshape(x.shape)


def assert_grad_close(analytic: torch.Tensor, fd: torch.Tensor, tol: float = 1e-4):
    err = (analytic - fd).abs() / fd.abs().clamp(min=1.0)
    assert float(err.max()) <= tol, f"max rel error {float(err.max())}"


class TestSigmoidFocalLoss:
    def test_saturated_correct_prediction(self):
        logits = torch.full((4,), -10.0)
        logits[1] = 30.0
        assert float(sigmoid_focal_loss(logits, 1)) < 1e-10

    def test_reduces_to_weighted_bce_at_gamma_zero(self):
        logits = torch.tensor([0.3, -1.2, 2.0])
        loss = sigmoid_focal_loss(logits, 2, alpha=0.5, gamma=0.0)
        p = torch.sigmoid(logits)
        bce = -(torch.log(p[2]) + torch.log(1 - p[0]) + torch.log(1 - p[1]))
        assert float(loss) == pytest.approx(0.5 * float(bce), rel=1e-6)

    def test_hand_value_single_class(self):
        # p = 0.5: loss = alpha * (1-p)^gamma * ln 2
        loss = sigmoid_focal_loss(torch.tensor([0.0]), 0, alpha=0.25, gamma=2.0)
        assert float(loss) == pytest.approx(0.25 * 0.25 * math.log(2), rel=1e-6)

    def test_no_object_sums_negative_terms(self):
        logits = torch.tensor([0.5, -0.5])
        loss = sigmoid_focal_loss(logits, NO_OBJECT)
        explicit = sum(
            0.75 * float(torch.sigmoid(x)) ** 2 * -math.log(1 - float(torch.sigmoid(x)))
            for x in logits
        )
        assert float(loss) == pytest.approx(explicit, rel=1e-5)

    @given(logit_vectors, st.integers(-1, 7))
    def test_nonnegative(self, logits, target):
        if target >= logits.numel():
            target = NO_OBJECT
        assert float(sigmoid_focal_loss(logits, target)) >= 0.0

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            sigmoid_focal_loss(torch.tensor([float("nan")]), 0)
        with pytest.raises(ValueError):
            sigmoid_focal_loss(torch.tensor([0.0]), 0, alpha=1.5)
        with pytest.raises(ValueError):
            sigmoid_focal_loss(torch.tensor([0.0]), 0, gamma=-1.0)
        with pytest.raises(ValueError):
            sigmoid_focal_loss(torch.tensor([0.0]), 3)

    def test_matrix_matches_per_slot_sum(self):
        torch.manual_seed(3)
        logits = torch.randn(5, 4, dtype=torch.float64)
        targets = torch.tensor([0, NO_OBJECT, 3, 1, NO_OBJECT])
        total = focal_loss_matrix(logits, targets)
        explicit = sum(
            sigmoid_focal_loss(logits[i], int(targets[i])) for i in range(5)
        )
        assert float(total) == pytest.approx(float(explicit), rel=1e-9)

    def test_matrix_class_subset_is_binary_on_column(self):
        torch.manual_seed(4)
        logits = torch.randn(3, 5, dtype=torch.float64)
        targets = torch.tensor([4, NO_OBJECT, NO_OBJECT])
        subset = torch.tensor([4])
        total = focal_loss_matrix(logits, targets, class_subset=subset)
        explicit = sum(
            sigmoid_focal_loss(logits[i, 4:5], 0 if int(targets[i]) == 4 else NO_OBJECT)
            for i in range(3)
        )
        assert float(total) == pytest.approx(float(explicit), rel=1e-9)


class TestBoxLoss:
    def test_identity_is_zero(self):
        b = torch.tensor([0.5, 0.5, 0.2, 0.2])
        assert float(box_loss(b, b)) == 0.0

    def test_disjoint_giou_component(self):
        # corner boxes [0,0,1,1] vs [1,1,2,2] scaled: giou = -0.5
        a = torch.tensor([0.25, 0.25, 0.5, 0.5], dtype=torch.float64)
        b = torch.tensor([0.75, 0.75, 0.5, 0.5], dtype=torch.float64)
        assert float(box_loss(a, b, w_l1=0.0, w_giou=2.0)) == pytest.approx(2.0 * 1.5, abs=1e-9)

    def test_l1_weight_is_linear(self):
        a = torch.tensor([0.4, 0.4, 0.2, 0.2])
        b = torch.tensor([0.6, 0.5, 0.25, 0.2])
        base = float(box_loss(a, b, w_l1=1.0, w_giou=0.0))
        assert float(box_loss(a, b, w_l1=2.0, w_giou=0.0)) == pytest.approx(2 * base, rel=1e-6)

    def test_rejects_negative_weights(self):
        b = torch.tensor([0.5, 0.5, 0.2, 0.2])
        with pytest.raises(ValueError):
            box_loss(b, b, w_l1=-1.0)


class TestMaskedFeatureDistill:
    def test_identity_is_zero(self):
        f = torch.randn(4, 3, 3)
        assert float(masked_feature_distill(f, f.clone(), torch.zeros(3, 3))) == 0.0

    def test_fully_masked_is_zero(self):
        f = torch.randn(2, 2, 2)
        g = torch.randn(2, 2, 2)
        assert float(masked_feature_distill(f, g, torch.ones(2, 2))) == 0.0

    def test_hand_case(self):
        f_n = torch.tensor([[[3.0]]])
        f_b = torch.tensor([[[1.0]]])
        assert float(masked_feature_distill(f_n, f_b, torch.zeros(1, 1))) == 2.0

    def test_invariant_to_masked_in_cells(self):
        torch.manual_seed(0)
        f_b = torch.randn(3, 4, 4, dtype=torch.float64)
        f_n = torch.randn(3, 4, 4, dtype=torch.float64)
        mask = torch.zeros(4, 4)
        mask[1:3, 1:3] = 1.0
        before = float(masked_feature_distill(f_n, f_b, mask))
        f_perturbed = f_n.clone()
        f_perturbed[:, 1:3, 1:3] += torch.randn(3, 2, 2, dtype=torch.float64) * 100
        after = float(masked_feature_distill(f_perturbed, f_b, mask))
        assert abs(before - after) <= 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            masked_feature_distill(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4), torch.zeros(3, 3))
        with pytest.raises(ValueError):
            masked_feature_distill(torch.zeros(2, 3, 3), torch.zeros(2, 3, 3), torch.zeros(4, 4))

    def test_base_features_are_constant(self):
        f_n = torch.randn(2, 2, 2, requires_grad=True)
        f_b = torch.randn(2, 2, 2, requires_grad=True)
        masked_feature_distill(f_n, f_b, torch.zeros(2, 2)).backward()
        assert f_n.grad is not None
        assert f_b.grad is None


class TestKLClassDistill:
    def test_identical_logits_zero(self):
        logits = torch.tensor([0.2, -1.0, 3.0])
        idx = torch.tensor([0, 1, 2])
        assert float(kl_class_distill(logits, logits.clone(), idx)) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        novel = torch.tensor([0.0, 0.0])
        base = torch.tensor([math.log(3.0), 0.0])
        val = float(kl_class_distill(novel, base, torch.tensor([0, 1])))
        expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
        assert val == pytest.approx(expected, rel=1e-6)
        assert val == pytest.approx(0.1308, abs=5e-5)

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(0)
        idx = torch.tensor([0, 1, 2, 3])
        for _ in range(200):
            a = torch.tensor(rng.normal(size=6))
            b = torch.tensor(rng.normal(size=6))
            assert float(kl_class_distill(a, b, idx)) >= -1e-12

    def test_empty_index_set_rejected(self):
        with pytest.raises(ValueError):
            kl_class_distill(torch.zeros(3), torch.zeros(3), torch.tensor([], dtype=torch.long))

    def test_softmax_over_subset_only(self):
        # changing a logit outside the subset must not change the loss
        novel = torch.tensor([1.0, -1.0, 0.3])
        base = torch.tensor([0.4, 0.2, 9.9])
        idx = torch.tensor([0, 1])
        a = float(kl_class_distill(novel, base, idx))
        novel2 = novel.clone()
        novel2[2] = -55.0
        assert float(kl_class_distill(novel2, base, idx)) == pytest.approx(a, abs=1e-12)

    def test_gradient_flows_to_novel_only(self):
        novel = torch.randn(4, requires_grad=True)
        base = torch.randn(4, requires_grad=True)
        kl_class_distill(novel, base, torch.tensor([0, 1, 2])).backward()
        assert novel.grad is not None
        assert base.grad is None


class TestGradients:
    """Spot checks; the full 50-instance sweeps run in the acceptance suite."""

    def test_focal_gradient(self):
        torch.manual_seed(1)
        x = torch.randn(6, dtype=torch.float64, requires_grad=True)
        sigmoid_focal_loss(x, 2).backward()
        fd = central_difference_grad(lambda v: sigmoid_focal_loss(v, 2), x)
        assert_grad_close(x.grad, fd)

    def test_box_loss_gradient(self):
        pred = torch.tensor([0.45, 0.5, 0.3, 0.24], dtype=torch.float64, requires_grad=True)
        target = torch.tensor([0.6, 0.52, 0.2, 0.3], dtype=torch.float64)
        box_loss(pred, target).backward()
        fd = central_difference_grad(lambda v: box_loss(v, target), pred)
        assert_grad_close(pred.grad, fd)

    def test_feature_distill_gradient(self):
        torch.manual_seed(2)
        f_b = torch.randn(2, 3, 3, dtype=torch.float64)
        mask = (torch.rand(3, 3) < 0.3).double()
        f_n = torch.randn(2, 3, 3, dtype=torch.float64, requires_grad=True)
        masked_feature_distill(f_n, f_b, mask).backward()
        fd = central_difference_grad(lambda v: masked_feature_distill(v, f_b, mask), f_n)
        assert_grad_close(f_n.grad, fd)

    def test_kl_gradient(self):
        torch.manual_seed(3)
        base = torch.randn(5, dtype=torch.float64)
        idx = torch.tensor([0, 2, 4])
        novel = torch.randn(5, dtype=torch.float64, requires_grad=True)
        kl_class_distill(novel, base, idx).backward()
        fd = central_difference_grad(lambda v: kl_class_distill(v, base, idx), novel)
        assert_grad_close(novel.grad, fd)

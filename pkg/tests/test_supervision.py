import numpy as np
import pytest
import torch

from cenet.config import LossWeights, PSchedule
from cenet.errors import ShapeError
from cenet.model import FeatureBundle
from cenet.supervision import (extract_contour, inverse_frequency_weights,
                               modify_contour_target, p_at_epoch,
                               soft_dice_loss, threshold_prediction,
                               total_loss, total_loss_terms,
                               weighted_softmax_cross_entropy)

from conftest import finite_difference_grad, relative_grad_error


def brute_force_contour(label):
    """Reference inner boundary: labeled voxels with a background face-neighbor."""
    label = label.astype(bool)
    out = np.zeros_like(label)
    shape = label.shape
    for idx in np.argwhere(label):
        x, y, z = idx
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
                           (0, 0, 1), (0, 0, -1)):
            nx, ny, nz = x + dx, y + dy, z + dz
            if not (0 <= nx < shape[0] and 0 <= ny < shape[1] and 0 <= nz < shape[2]):
                out[x, y, z] = True
                break
            if not label[nx, ny, nz]:
                out[x, y, z] = True
                break
    return out


class TestExtractContour:
    def test_empty_label(self):
        assert not extract_contour(np.zeros((8, 8, 8), dtype=np.uint8)).any()

    def test_single_voxel_is_its_own_contour(self):
        label = np.zeros((5, 5, 5), dtype=np.uint8)
        label[2, 2, 2] = 1
        contour = extract_contour(label)
        assert contour.sum() == 1 and contour[2, 2, 2]

    def test_solid_cube_shell(self):
        label = np.zeros((8, 8, 8), dtype=np.uint8)
        label[2:6, 2:6, 2:6] = 1
        contour = extract_contour(label)
        assert contour.sum() == 4 ** 3 - 2 ** 3  # 56-voxel shell
        np.testing.assert_array_equal(contour, brute_force_contour(label))

    def test_matches_brute_force_on_random_masks(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            label = (rng.random((7, 6, 5)) > 0.6).astype(np.uint8)
            np.testing.assert_array_equal(extract_contour(label),
                                          brute_force_contour(label))

    def test_contour_voxels_are_label_voxels_with_background_neighbor(self):
        rng = np.random.default_rng(4)
        label = (rng.random((9, 9, 9)) > 0.5).astype(np.uint8)
        contour = extract_contour(label)
        assert (label.astype(bool) | ~contour).all()  # contour subset of label

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            extract_contour(np.full((4, 4, 4), 2.0))

    def test_non_3d_rejected(self):
        with pytest.raises(ShapeError):
            extract_contour(np.zeros((4, 4)))


class TestThresholdPrediction:
    def test_zero_probability_keeps_everything(self):
        prob = torch.zeros(3, 3, 3)
        assert threshold_prediction(prob, 0.5).sum() == 27

    def test_certain_prediction_erases_everything_at_p_one(self):
        prob = torch.ones(3, 3, 3)
        assert threshold_prediction(prob, 1.0).sum() == 0  # strict inequality

    def test_elementwise_rule(self):
        prob = torch.tensor([0.2, 0.5, 0.9])
        torch.testing.assert_close(threshold_prediction(prob, 0.5),
                                   torch.tensor([1.0, 0.0, 0.0]))

    @pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
    def test_invalid_threshold(self, p):
        with pytest.raises(ValueError):
            threshold_prediction(torch.zeros(2, 2, 2), p)

    def test_out_of_range_probabilities_rejected(self):
        with pytest.raises(ValueError):
            threshold_prediction(torch.full((2, 2, 2), 1.5), 0.5)


class TestModifyContourTarget:
    def test_unconfident_network_keeps_full_contour(self):
        gamma = (torch.rand(4, 4, 4) > 0.5).float()
        out = modify_contour_target(gamma, torch.zeros(4, 4, 4), 0.5)
        torch.testing.assert_close(out, gamma)

    def test_confident_network_erases_all(self):
        gamma = torch.ones(4, 4, 4)
        out = modify_contour_target(gamma, torch.ones(4, 4, 4), 1.0)
        assert out.sum() == 0

    def test_elementwise_product(self):
        gamma = torch.tensor([1.0, 1.0, 0.0])
        prob = torch.tensor([0.9, 0.1, 0.9])
        torch.testing.assert_close(modify_contour_target(gamma, prob, 0.5),
                                   torch.tensor([0.0, 1.0, 0.0]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            modify_contour_target(torch.ones(2, 2, 2), torch.ones(2, 2, 3), 0.5)

    def test_subset_and_monotone_in_p(self):
        rng = torch.Generator().manual_seed(5)
        for _ in range(50):
            gamma = (torch.rand(5, 5, 5, generator=rng) > 0.6).float()
            prob = torch.rand(5, 5, 5, generator=rng)
            small = modify_contour_target(gamma, prob, 0.3)
            large = modify_contour_target(gamma, prob, 0.8)
            assert ((gamma - small) >= 0).all()            # subset of gamma
            assert ((large - small) >= 0).all()            # monotone in p

    def test_no_gradient_through_threshold(self):
        gamma = torch.ones(3, 3, 3)
        prob = torch.rand(3, 3, 3, requires_grad=True)
        out = modify_contour_target(gamma, prob, 0.5)
        assert not out.requires_grad


class TestSoftDiceLoss:
    def test_perfect_overlap_is_near_zero(self):
        target = (torch.rand(4, 4, 4) > 0.5).float()
        assert float(soft_dice_loss(target, target)) < 1e-5

    def test_disjoint_supports_is_near_one(self):
        prob = torch.zeros(4, 4, 4)
        prob[0] = 1.0
        target = torch.zeros(4, 4, 4)
        target[1] = 1.0
        assert float(soft_dice_loss(prob, target)) > 1 - 1e-5

    def test_hand_computed_value(self):
        # constant 0.5 prediction, half the 2^3 voxels labeled
        prob = torch.full((2, 2, 2), 0.5)
        target = torch.zeros(2, 2, 2)
        target[0] = 1.0
        eps = 1e-5
        expected = 1.0 - (2.0 * 2.0 + eps) / (2.0 + 4.0 + eps)
        assert float(soft_dice_loss(prob, target)) == pytest.approx(expected, abs=1e-9)

    def test_range_and_permutation_invariance(self):
        rng = torch.Generator().manual_seed(7)
        for _ in range(20):
            prob = torch.rand(3, 3, 3, generator=rng, dtype=torch.float64)
            target = (torch.rand(3, 3, 3, generator=rng) > 0.5).double()
            loss = float(soft_dice_loss(prob, target))
            assert 0.0 <= loss <= 1.0 + 1e-4
            perm = torch.randperm(27, generator=rng)
            permuted = float(soft_dice_loss(prob.reshape(-1)[perm],
                                            target.reshape(-1)[perm]))
            assert permuted == pytest.approx(loss, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        prob = torch.rand(4, 4, 4, dtype=torch.float64, requires_grad=True)
        target = (torch.rand(4, 4, 4) > 0.5).double()
        loss = soft_dice_loss(prob, target)
        loss.backward()
        numeric = finite_difference_grad(
            lambda: soft_dice_loss(prob.data, target), prob.data, eps=1e-6)
        assert relative_grad_error(prob.grad, numeric) < 1e-4


class TestWeightedCrossEntropy:
    def test_confident_correct_logits_vanish(self):
        target = (torch.rand(1, 4, 4, 4) > 0.5).float()
        logits = torch.stack([(1 - target) * 20, target * 20], dim=1)
        loss = weighted_softmax_cross_entropy(logits, target, (1.0, 1.0))
        assert float(loss) < 1e-6

    def test_uniform_logits_give_log_two(self):
        logits = torch.zeros(1, 2, 3, 3, 3)
        target = (torch.rand(1, 3, 3, 3) > 0.5).float()
        loss = weighted_softmax_cross_entropy(logits, target, (1.0, 1.0))
        assert float(loss) == pytest.approx(np.log(2.0), rel=1e-6)

    def test_zero_weight_class_ignored(self):
        logits = torch.randn(1, 2, 3, 3, 3)
        target = torch.zeros(1, 3, 3, 3)
        loss = weighted_softmax_cross_entropy(logits, target, (0.0, 1.0))
        assert float(loss) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            weighted_softmax_cross_entropy(torch.zeros(1, 2, 3, 3, 3),
                                           torch.zeros(1, 3, 3, 4))

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        logits = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
        target = (torch.rand(1, 4, 4, 4) > 0.5).double()
        loss = weighted_softmax_cross_entropy(logits, target, (0.7, 1.3))
        loss.backward()
        numeric = finite_difference_grad(
            lambda: weighted_softmax_cross_entropy(logits.data, target, (0.7, 1.3)),
            logits.data, eps=1e-6)
        assert relative_grad_error(logits.grad, numeric) < 1e-4


class TestInverseFrequencyWeights:
    def test_rare_foreground_hits_clamp(self):
        target = torch.zeros(10, 10, 10)
        target[0, 0, 0] = 1.0
        w0, w1 = inverse_frequency_weights(target)
        assert w1 == 10.0 and 1.0 <= w0 <= 1.01

    def test_empty_target_clamps_instead_of_exploding(self):
        w0, w1 = inverse_frequency_weights(torch.zeros(4, 4, 4))
        assert w1 == 10.0 and w0 == 1.0


def random_bundle(rng_seed=0, with_shape=True, with_contour=True, dtype=torch.float64):
    torch.manual_seed(rng_seed)
    f_out = torch.randn(1, 2, 4, 4, 4, dtype=dtype, requires_grad=True)
    f_shape0 = torch.randn(1, 2, 4, 4, 4, dtype=dtype, requires_grad=True) if with_shape else None
    f_shape1 = torch.randn(1, 2, 4, 4, 4, dtype=dtype, requires_grad=True) if with_shape else None
    f_contour = torch.randn(1, 2, 4, 4, 4, dtype=dtype, requires_grad=True) if with_contour else None
    bundle = FeatureBundle(f_out=f_out, f_shape0=f_shape0, f_shape1=f_shape1,
                           f_contour=f_contour, prob=torch.softmax(f_out, dim=1))
    target = (torch.rand(1, 4, 4, 4) > 0.5).to(dtype)
    gamma = (torch.rand(1, 4, 4, 4) > 0.7).to(dtype)
    return bundle, target, gamma


class TestTotalLoss:
    def test_zero_weights_isolate_output_dice(self):
        bundle, target, gamma = random_bundle()
        weights = LossWeights(alpha=0.0, beta=0.0, gamma=0.0)
        loss = total_loss(bundle, target, gamma, weights, params=[torch.ones(3)])
        expected = soft_dice_loss(bundle.prob[:, 1], target)
        assert float(loss) == pytest.approx(float(expected), abs=1e-12)

    def test_perfect_features_give_near_zero(self):
        target = (torch.rand(1, 4, 4, 4) > 0.5).float()
        gamma = (torch.rand(1, 4, 4, 4) > 0.7).float()
        big = 30.0
        f_out = torch.stack([(1 - target) * big, target * big], dim=1)
        f_shape1 = torch.zeros_like(f_out)
        f_contour = torch.stack([(1 - gamma) * big, gamma * big], dim=1)
        bundle = FeatureBundle(f_out=f_out, f_shape0=f_out.clone(), f_shape1=f_shape1,
                               f_contour=f_contour, prob=torch.softmax(f_out, dim=1))
        loss = total_loss(bundle, target, gamma, LossWeights(gamma=0.0))
        assert float(loss) < 1e-4

    def test_l2_term_linear_in_gamma(self):
        bundle, target, gamma_c = random_bundle()
        params = [torch.randn(5, dtype=torch.float64)]
        l2 = float(sum(p.pow(2).sum() for p in params))
        lo = total_loss(bundle, target, gamma_c, LossWeights(gamma=0.1), params)
        hi = total_loss(bundle, target, gamma_c, LossWeights(gamma=0.2), params)
        assert float(hi - lo) == pytest.approx(0.1 * l2, rel=1e-9)

    def test_missing_branches_drop_terms(self):
        bundle, target, gamma_c = random_bundle(with_shape=False, with_contour=False)
        terms = total_loss_terms(bundle, target, gamma_c, LossWeights())
        assert terms.dice_shape is None and terms.contour_ce is None
        assert float(terms.total) == pytest.approx(float(terms.dice_out), abs=1e-12)

    def test_gradients_match_finite_differences(self):
        bundle, target, gamma_c = random_bundle(rng_seed=3)
        params = [torch.randn(4, dtype=torch.float64, requires_grad=True)]
        weights = LossWeights()

        def recompute():
            fresh = FeatureBundle(
                f_out=bundle.f_out.data, f_shape0=bundle.f_shape0.data,
                f_shape1=bundle.f_shape1.data, f_contour=bundle.f_contour.data,
                prob=torch.softmax(bundle.f_out.data, dim=1))
            return total_loss(fresh, target, gamma_c, weights,
                              params=[params[0].data])

        loss = total_loss(bundle, target, gamma_c, weights, params=params)
        loss.backward()
        for leaf in (bundle.f_out, bundle.f_shape0, bundle.f_contour, params[0]):
            numeric = finite_difference_grad(recompute, leaf.data, eps=1e-6)
            assert relative_grad_error(leaf.grad, numeric) < 1e-4


class TestPSchedule:
    def test_held_at_one_before_decay(self):
        sched = PSchedule()
        assert p_at_epoch(0, sched) == 1.0
        assert p_at_epoch(50, sched) == 1.0
        assert p_at_epoch(99, sched) == 1.0

    def test_decay_boundaries(self):
        sched = PSchedule()
        assert p_at_epoch(100, sched) == 0.9
        assert p_at_epoch(109, sched) == 0.9
        assert p_at_epoch(110, sched) == 0.81
        assert p_at_epoch(115, sched) == 0.81

    def test_clamped_floor(self):
        sched = PSchedule()
        assert p_at_epoch(300, sched) == 0.5

    def test_non_increasing_and_bounded(self):
        sched = PSchedule()
        values = [p_at_epoch(e, sched) for e in range(0, 400)]
        assert all(0.5 <= v <= 1.0 for v in values)
        assert all(a >= b for a, b in zip(values, values[1:]))

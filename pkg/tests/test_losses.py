"""Loss formula fidelity and gradient tests."""

import math

import numpy as np
import pytest

from voxseg.autodiff import Tensor, grad_check, sigmoid
from voxseg.losses import bce_loss, combined_loss, dice_loss


class TestDiceLoss:
    def test_perfect_overlap_is_zero(self):
        g = np.zeros((4, 4, 4))
        g[1:3, 1:3, 1:3] = 1.0
        loss = dice_loss(Tensor(g.astype(np.float64)), g)
        assert loss.item() == 0.0

    def test_empty_prediction(self):
        g = np.zeros(20)
        g[:10] = 1.0
        p = Tensor(np.zeros(20, dtype=np.float64))
        want = 1.0 - 1e-5 / (10.0 + 1e-5)
        assert math.isclose(dice_loss(p, g, eps=1e-5).item(), want, rel_tol=1e-12)

    def test_both_empty_rescued_by_eps(self):
        p = Tensor(np.zeros(8, dtype=np.float64))
        assert dice_loss(p, np.zeros(8)).item() == 0.0

    def test_channel_averaging(self):
        # channel 0 perfect, channel 1 empty prediction vs 4 positives
        p = np.zeros((1, 2, 2, 2, 2), dtype=np.float64)
        g = np.zeros((1, 2, 2, 2, 2))
        p[0, 0, 0] = 1.0
        g[0, 0, 0] = 1.0
        g[0, 1, 1] = 1.0
        eps = 1e-5
        want = 0.5 * (0.0 + (1.0 - eps / (4.0 + eps)))
        assert math.isclose(dice_loss(Tensor(p), g, eps).item(), want, rel_tol=1e-9)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            dice_loss(Tensor(np.array([1.5])), np.array([1.0]))

    def test_complements_dice_score_for_binary_predictions(self):
        from voxseg.metrics import dice_score

        rng = np.random.default_rng(6)
        for _ in range(10):
            a = rng.random((6, 6, 6)) > 0.6
            b = rng.random((6, 6, 6)) > 0.6
            loss = dice_loss(Tensor(a.astype(np.float64)), b.astype(np.float64), eps=1e-14).item()
            assert abs((1.0 - loss) - dice_score(a, b)) < 1e-9

    def test_gradcheck(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((1, 3, 2, 2, 2)), requires_grad=True)
        g = (rng.random((1, 3, 2, 2, 2)) > 0.5).astype(np.float64)

        def f():
            return dice_loss(sigmoid(x), g)

        assert grad_check(f, x) < 1e-7


class TestBceLoss:
    def test_half_probability_is_ln2(self):
        rng = np.random.default_rng(1)
        g = (rng.random(100) > 0.3).astype(np.float64)
        p = Tensor(np.full(100, 0.5))
        assert math.isclose(bce_loss(p, g).item(), math.log(2.0), abs_tol=1e-9)

    def test_perfect_prediction_near_zero(self):
        g = np.array([0.0, 1.0, 1.0, 0.0])
        loss = bce_loss(Tensor(g.copy()), g, clip=1e-7)
        assert math.isclose(loss.item(), -math.log(1.0 - 1e-7), rel_tol=1e-6)
        assert loss.item() < 2e-7

    def test_clip_keeps_loss_finite(self):
        g = np.ones(4)
        loss = bce_loss(Tensor(np.zeros(4)), g, clip=1e-7)
        assert math.isclose(loss.item(), -math.log(1e-7), rel_tol=1e-9)

    def test_minimized_at_target_rate(self):
        # over constant predictors, the minimum sits at p = mean(g)
        rng = np.random.default_rng(2)
        g = (rng.random(400) > 0.7).astype(np.float64)
        rate = g.mean()
        candidates = np.linspace(0.01, 0.99, 99)
        losses = [bce_loss(Tensor(np.full(400, c)), g).item() for c in candidates]
        assert abs(candidates[int(np.argmin(losses))] - rate) < 0.02

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal(30), requires_grad=True)
        g = (rng.random(30) > 0.5).astype(np.float64)

        def f():
            return bce_loss(sigmoid(x), g)

        assert grad_check(f, x) < 1e-7


class TestCombinedLoss:
    def test_is_arithmetic_mean(self):
        rng = np.random.default_rng(4)
        p_data = rng.random((1, 3, 2, 2, 4))
        g = (rng.random((1, 3, 2, 2, 4)) > 0.5).astype(np.float64)
        combined = combined_loss(Tensor(p_data), g).item()
        parts = dice_loss(Tensor(p_data), g).item() + bce_loss(Tensor(p_data), g).item()
        assert abs(combined - parts / 2.0) < 1e-12

    def test_half_on_half_targets(self):
        # hand evaluation on a 4-voxel grid: p = 0.5 everywhere, g = 1 on half
        g = np.array([1.0, 1.0, 0.0, 0.0])
        p = Tensor(np.full(4, 0.5))
        dice = 1.0 - (2.0 * 1.0 + 1e-5) / (2.0 + 2.0 + 1e-5)
        want = (dice + math.log(2.0)) / 2.0
        assert math.isclose(combined_loss(p, g).item(), want, rel_tol=1e-9)

    def test_perfect_binary_prediction(self):
        g = np.array([0.0, 1.0, 1.0, 0.0])
        loss = combined_loss(Tensor(g.copy()), g).item()
        assert loss == pytest.approx(1e-7 / 2.0, rel=1e-3)

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((1, 3, 2, 2, 2)), requires_grad=True)
        g = (rng.random((1, 3, 2, 2, 2)) > 0.4).astype(np.float64)

        def f():
            return combined_loss(sigmoid(x), g)

        assert grad_check(f, x) < 1e-7

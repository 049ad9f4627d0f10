"""Tensor primitive tests: forward examples, oracle agreement, gradients."""

import numpy as np
import pytest

from voxseg.autodiff import (
    DropoutMode,
    Tensor,
    backward,
    clamp,
    concat,
    contract,
    conv3d,
    conv_transpose3d,
    derive_rng,
    dropout,
    global_avg_pool,
    grad_check,
    group_norm,
    maxpool3d,
    relu,
    sigmoid,
    softmax,
)

from oracles import conv3d_loops, conv_transpose3d_scatter, matmul_loops


def randt(rng, shape, requires_grad=False, dtype=np.float64):
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=requires_grad)


class TestConv3d:
    def test_pointwise_identity(self):
        rng = np.random.default_rng(0)
        x = randt(rng, (1, 3, 4, 5, 6))
        w = np.zeros((3, 3, 1, 1, 1))
        for c in range(3):
            w[c, c, 0, 0, 0] = 1.0
        out = conv3d(x, Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_3cube(self):
        x = Tensor(np.ones((1, 1, 3, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3, 3)))
        out = conv3d(x, w, Tensor(np.zeros(1)), padding=1)
        assert out.data[0, 0, 1, 1, 1] == 27.0
        assert out.data[0, 0, 0, 0, 0] == 8.0

    def test_all_ones_dilated(self):
        x = Tensor(np.ones((1, 1, 5, 5, 5)))
        w = Tensor(np.ones((1, 1, 3, 3, 3)))
        out = conv3d(x, w, Tensor(np.zeros(1)), padding=2, dilation=2)
        assert out.shape == (1, 1, 5, 5, 5)
        assert out.data[0, 0, 2, 2, 2] == 27.0
        assert out.data[0, 0, 0, 0, 0] == 8.0

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 1, 1), (1, 2, 2), (2, 1, 1), (1, 0, 1)])
    def test_matches_loop_oracle(self, stride, padding, dilation):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 5, 6, 4))
        w = rng.standard_normal((4, 3, 3, 3, 3))
        b = rng.standard_normal(4)
        want = conv3d_loops(x, w, b, stride=stride, padding=padding, dilation=dilation)
        got = conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, dilation=dilation)
        np.testing.assert_allclose(got.data, want, rtol=1e-10, atol=1e-10)

    @pytest.mark.parametrize("k", [5, 7])
    def test_large_kernels_match_loop_oracle(self, k):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((1, 2, 8, 8, 7))
        w = rng.standard_normal((2, 2, k, k, k))
        want = conv3d_loops(x, w, padding=(k - 1) // 2)
        got = conv3d(Tensor(x), Tensor(w), padding=(k - 1) // 2)
        np.testing.assert_allclose(got.data, want, rtol=1e-10, atol=1e-10)

    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    @pytest.mark.parametrize("dilation", [1, 2, 3])
    def test_same_padding_preserves_shape(self, k, dilation):
        rng = np.random.default_rng(1)
        x = randt(rng, (1, 2, 8, 8, 8))
        w = randt(rng, (2, 2, k, k, k))
        out = conv3d(x, w, padding=dilation * (k - 1) // 2, dilation=dilation)
        assert out.shape == x.shape

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        x = randt(rng, (1, 2, 4, 4, 3), requires_grad=True)
        w = randt(rng, (3, 2, 3, 3, 3), requires_grad=True)
        b = randt(rng, (3,), requires_grad=True)

        def f():
            return conv3d(x, w, b, padding=1).sum()

        assert grad_check(f, [x, w, b]) < 1e-6

    def test_gradcheck_dilated_strided(self):
        rng = np.random.default_rng(4)
        x = randt(rng, (1, 2, 6, 6, 5), requires_grad=True)
        w = randt(rng, (2, 2, 3, 3, 3), requires_grad=True)

        def f():
            y = conv3d(x, w, stride=2, padding=2, dilation=2)
            return (y * y).sum()

        assert grad_check(f, [x, w]) < 1e-6

    def test_channel_mismatch_raises(self):
        x = Tensor(np.ones((1, 2, 4, 4, 4)))
        w = Tensor(np.ones((1, 3, 3, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            conv3d(x, w, padding=1)

    def test_kernel_larger_than_padded_input_raises(self):
        x = Tensor(np.ones((1, 1, 2, 2, 2)))
        w = Tensor(np.ones((1, 1, 5, 5, 5)))
        with pytest.raises(ValueError, match="larger"):
            conv3d(x, w)


class TestConvTranspose3d:
    def test_single_voxel_scatter(self):
        x = Tensor(np.full((1, 1, 1, 1, 1), 3.5))
        w = Tensor(np.ones((1, 1, 2, 2, 2)))
        out = conv_transpose3d(x, w, Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 2, 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2, 2), 3.5))

    def test_nonoverlapping_tiles(self):
        x = Tensor(np.ones((1, 1, 2, 2, 2)))
        w = Tensor(np.ones((1, 1, 2, 2, 2)))
        out = conv_transpose3d(x, w)
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 4, 4, 4)))

    def test_matches_scatter_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 3, 2, 4))
        w = rng.standard_normal((3, 2, 2, 2, 2))
        b = rng.standard_normal(2)
        want = conv_transpose3d_scatter(x, w, b)
        got = conv_transpose3d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(got.data, want, rtol=1e-10, atol=1e-10)

    def test_grad_of_sum_is_weight_sum(self):
        rng = np.random.default_rng(6)
        x = randt(rng, (1, 2, 3, 3, 2), requires_grad=True)
        w = randt(rng, (2, 3, 2, 2, 2))
        out = conv_transpose3d(x, w)
        backward(out.sum())
        per_cin = w.data.sum(axis=(1, 2, 3, 4))
        want = np.broadcast_to(per_cin.reshape(1, 2, 1, 1, 1), x.shape)
        np.testing.assert_allclose(x.grad, want, rtol=1e-10)

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        x = randt(rng, (1, 2, 3, 2, 3), requires_grad=True)
        w = randt(rng, (2, 3, 2, 2, 2), requires_grad=True)
        b = randt(rng, (3,), requires_grad=True)

        def f():
            y = conv_transpose3d(x, w, b)
            return (y * y).sum()

        assert grad_check(f, [x, w, b]) < 1e-6

    def test_doubles_then_pool_restores(self):
        rng = np.random.default_rng(8)
        x = randt(rng, (1, 2, 4, 6, 2))
        w = randt(rng, (2, 2, 2, 2, 2))
        up = conv_transpose3d(x, w)
        assert up.shape == (1, 2, 8, 12, 4)
        assert maxpool3d(up).shape == x.shape


class TestMaxpool3d:
    def test_constant(self):
        out = maxpool3d(Tensor(np.full((1, 2, 4, 4, 4), 2.5)))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2, 2), 2.5))

    def test_block_enumeration(self):
        x = np.arange(1, 9, dtype=np.float64).reshape(1, 1, 2, 2, 2)
        out = maxpool3d(Tensor(x))
        assert out.data.reshape(()) == 8.0

    def test_gradient_one_per_block(self):
        rng = np.random.default_rng(9)
        vals = rng.permutation(4 * 4 * 4).astype(np.float64).reshape(1, 1, 4, 4, 4)
        x = Tensor(vals, requires_grad=True)
        backward(maxpool3d(x).sum())
        assert x.grad.sum() == 8.0  # one per 2x2x2 block
        assert set(np.unique(x.grad)) == {0.0, 1.0}

    def test_gradcheck(self):
        rng = np.random.default_rng(10)
        vals = (rng.permutation(2 * 4 * 4 * 4) * 0.01).astype(np.float64).reshape(1, 2, 4, 4, 4)
        x = Tensor(vals, requires_grad=True)

        def f():
            return (maxpool3d(x) * maxpool3d(x)).sum()

        assert grad_check(f, x, h=1e-6) < 1e-6

    def test_odd_extent_raises(self):
        with pytest.raises(ValueError, match="even"):
            maxpool3d(Tensor(np.ones((1, 1, 3, 4, 4))))


class TestGroupNorm:
    def test_normalizes_per_group(self):
        rng = np.random.default_rng(11)
        x = randt(rng, (2, 6, 4, 3, 2))
        out = group_norm(x, 3, Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=1e-12)
        grouped = out.data.reshape(2, 3, -1)
        np.testing.assert_allclose(grouped.mean(axis=2), 0.0, atol=1e-9)
        np.testing.assert_allclose(grouped.var(axis=2), 1.0, atol=1e-6)

    def test_constant_input_returns_beta(self):
        x = Tensor(np.full((1, 4, 2, 2, 2), 7.0))
        beta = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
        out = group_norm(x, 2, Tensor(np.ones(4)), beta)
        want = np.broadcast_to(beta.data.reshape(1, 4, 1, 1, 1), x.shape)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    @pytest.mark.parametrize("groups", [1, 2, 4])
    def test_gradcheck(self, groups):
        rng = np.random.default_rng(12)
        x = randt(rng, (2, 4, 3, 2, 2), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
        beta = Tensor(rng.standard_normal(4), requires_grad=True)
        # weighting breaks the sum-of-squares invariance of normalized
        # outputs, which would otherwise zero the x gradient at groups == C
        w = rng.standard_normal((2, 4, 3, 2, 2))

        def f():
            y = group_norm(x, groups, gamma, beta) * Tensor(w)
            return (y * y).sum()

        assert grad_check(f, [x, gamma, beta]) < 1e-6

    def test_indivisible_groups_raises(self):
        x = Tensor(np.ones((1, 5, 2, 2, 2)))
        with pytest.raises(ValueError, match="divisible"):
            group_norm(x, 2, Tensor(np.ones(5)), Tensor(np.zeros(5)))


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.arange(8.0).reshape(1, 1, 2, 2, 2))
        for mode in DropoutMode:
            out = dropout(x, 0.0, mode, 1)
            np.testing.assert_array_equal(out.data, x.data)

    def test_off_mode_identity(self):
        rng = np.random.default_rng(13)
        x = randt(rng, (3, 4, 5))
        out = dropout(x, 0.5, DropoutMode.OFF, 99)
        np.testing.assert_array_equal(out.data, x.data)

    def test_inverted_scaling_mean(self):
        x = Tensor(np.ones(100_000))
        out = dropout(x, 0.5, DropoutMode.TRAIN, 42)
        assert 0.98 <= out.data.mean() <= 1.02

    def test_seed_reproducible(self):
        x = Tensor(np.ones(1000))
        a = dropout(x, 0.3, DropoutMode.MC_ACTIVE, 7)
        b = dropout(x, 0.3, DropoutMode.MC_ACTIVE, 7)
        np.testing.assert_array_equal(a.data, b.data)
        c = dropout(x, 0.3, DropoutMode.MC_ACTIVE, 8)
        assert not np.array_equal(a.data, c.data)

    def test_train_and_mc_modes_sample_identically(self):
        x = Tensor(np.ones(512))
        a = dropout(x, 0.4, DropoutMode.TRAIN, 9)
        b = dropout(x, 0.4, DropoutMode.MC_ACTIVE, 9)
        np.testing.assert_array_equal(a.data, b.data)

    def test_missing_rng_rejected_when_sampling(self):
        x = Tensor(np.ones(8))
        with pytest.raises(ValueError, match="seed or Generator"):
            dropout(x, 0.5, DropoutMode.TRAIN, None)

    def test_backward_uses_same_mask(self):
        x = Tensor(np.ones(1000, dtype=np.float64), requires_grad=True)
        out = dropout(x, 0.4, DropoutMode.TRAIN, 3)
        backward(out.sum())
        np.testing.assert_array_equal(x.grad, out.data)

    def test_invalid_rate(self):
        x = Tensor(np.ones(4))
        with pytest.raises(ValueError):
            dropout(x, 1.0, DropoutMode.TRAIN, 0)
        with pytest.raises(ValueError):
            dropout(x, -0.1, DropoutMode.TRAIN, 0)


class TestActivations:
    def test_relu(self):
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_zero(self):
        assert sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_sigmoid_extremes_are_finite(self):
        out = sigmoid(Tensor(np.array([-500.0, 500.0])))
        assert np.all(np.isfinite(out.data))

    def test_softmax_uniform(self):
        out = softmax(Tensor(np.full((2, 5), 3.0)), axis=1)
        np.testing.assert_allclose(out.data, 0.2)

    def test_softmax_normalizes_and_shift_invariant(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((3, 7))
        a = softmax(Tensor(x), axis=1)
        b = softmax(Tensor(x + 123.0), axis=1)
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_softmax_gradcheck(self):
        rng = np.random.default_rng(15)
        x = randt(rng, (2, 4, 3), requires_grad=True)
        w = rng.standard_normal((2, 4, 3))

        def f():
            return (softmax(x, axis=1) * Tensor(w)).sum()

        assert grad_check(f, x) < 1e-7


class TestContract:
    def test_identity_matrix(self):
        rng = np.random.default_rng(16)
        x = randt(rng, (3, 4))
        out = contract(x, Tensor(np.eye(4)), "ij,jk->ik")
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_two_by_two(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = contract(a, Tensor(np.eye(2)), "ij,jk->ik")
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(17)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        got = contract(Tensor(a), Tensor(b), "ij,jk->ik")
        np.testing.assert_allclose(got.data, matmul_loops(a, b), rtol=1e-12)

    def test_attention_patterns_gradcheck(self):
        rng = np.random.default_rng(18)
        k = randt(rng, (2, 3, 5), requires_grad=True)
        q = randt(rng, (2, 3, 5), requires_grad=True)
        v = randt(rng, (2, 3, 5), requires_grad=True)

        def f():
            attn = softmax(contract(k, q, "bin,bjn->bij"), axis=2)
            mixed = contract(attn, v, "bij,bjn->bin")
            return (mixed * mixed).sum()

        assert grad_check(f, [k, q, v]) < 1e-6

    def test_extent_mismatch_raises(self):
        with pytest.raises(ValueError, match="mismatch"):
            contract(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), "ij,jk->ik")

    def test_dangling_axis_raises(self):
        with pytest.raises(ValueError, match="appears nowhere"):
            contract(Tensor(np.ones((2, 3))), Tensor(np.ones((2,))), "ij,i->i")


class TestGlobalAvgPool:
    def test_constant(self):
        out = global_avg_pool(Tensor(np.full((1, 3, 2, 2, 2), 4.5)))
        np.testing.assert_array_equal(out.data, np.full((1, 3, 1, 1, 1), 4.5))

    def test_enumerated_mean(self):
        x = np.arange(8.0).reshape(1, 1, 2, 2, 2)
        assert global_avg_pool(Tensor(x)).data.reshape(()) == 3.5

    def test_gradcheck(self):
        rng = np.random.default_rng(19)
        x = randt(rng, (2, 3, 2, 2, 2), requires_grad=True)

        def f():
            y = global_avg_pool(x)
            return (y * y).sum()

        assert grad_check(f, x) < 1e-7


class TestElementwise:
    def test_add_zero_identity(self):
        rng = np.random.default_rng(20)
        x = randt(rng, (2, 3))
        np.testing.assert_array_equal((x + 0.0).data, x.data)

    def test_mul_one_identity(self):
        rng = np.random.default_rng(21)
        x = randt(rng, (2, 3))
        np.testing.assert_array_equal((x * 1.0).data, x.data)

    def test_broadcast_gradcheck(self):
        rng = np.random.default_rng(22)
        a = randt(rng, (2, 3, 1, 1, 1), requires_grad=True)
        b = randt(rng, (2, 3, 2, 2, 2), requires_grad=True)

        def f():
            return ((a * b) * (a * b)).sum()

        assert grad_check(f, [a, b]) < 1e-7

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ValueError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 5)))

    def test_concat_backward_splits(self):
        a = Tensor(np.ones((2, 3), dtype=np.float64), requires_grad=True)
        b = Tensor(np.ones((2, 2), dtype=np.float64), requires_grad=True)
        out = concat([a, b], axis=1)
        backward((out * Tensor(np.arange(10.0).reshape(2, 5))).sum())
        np.testing.assert_array_equal(a.grad, [[0, 1, 2], [5, 6, 7]])
        np.testing.assert_array_equal(b.grad, [[3, 4], [8, 9]])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_2x(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward(x.sum())
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(x * x)

    def test_nonfinite_forward_raises(self):
        x = Tensor(np.array([0.0, 1.0]))
        with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
            1.0 / x


class TestGradCheckHarness:
    def test_linear_is_exact(self):
        rng = np.random.default_rng(23)
        x = randt(rng, (4, 4), requires_grad=True)
        assert grad_check(lambda: x.sum(), x) < 1e-10

    def test_sigmoid_chain(self):
        rng = np.random.default_rng(24)
        x = randt(rng, (50,), requires_grad=True)
        assert grad_check(lambda: sigmoid(x).sum(), x, h=1e-5) < 1e-7

    def test_rejects_float32(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(TypeError, match="float64"):
            grad_check(lambda: x.sum(), x)

    def test_clamp_gradient_masks_outside(self):
        x = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
        backward(clamp(x, 0.0, 1.0).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestSeeding:
    def test_derived_streams_reproducible(self):
        a = derive_rng(5, 1, 2).random(4)
        b = derive_rng(5, 1, 2).random(4)
        c = derive_rng(5, 1, 3).random(4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

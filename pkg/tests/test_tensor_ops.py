"""Forward semantics of the tensor ops against brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fednet import ops
from fednet.tensor import Tensor

from oracles import (conv2d_reference, conv_transpose2d_reference, dense_reference,
                     global_avg_pool_reference, pixel_shuffle_reference,
                     sigmoid_scalar, upsample_nearest_reference)

RNG = np.random.default_rng(20240811)


def t(arr, **kw):
    return Tensor(np.asarray(arr, dtype=np.float64), **kw)


class TestConv2d:
    def test_identity_kernel(self):
        x = RNG.standard_normal((2, 1, 4, 5))
        w = np.ones((1, 1, 1, 1))
        out = ops.conv2d(t(x), t(w), t(np.zeros(1)), 1, 0)
        np.testing.assert_array_equal(out.data, x)

    def test_zero_kernel(self):
        x = RNG.standard_normal((1, 3, 4, 4))
        w = np.zeros((2, 3, 3, 3))
        out = ops.conv2d(t(x), t(w), t(np.zeros(2)), 1, 1)
        assert not out.data.any()

    @pytest.mark.parametrize("xshape,wshape,stride,pad", [
        ((1, 2, 4, 4), (3, 2, 3, 3), 1, 1),
        ((2, 3, 7, 6), (4, 3, 3, 2), 2, 1),
        ((1, 1, 5, 5), (2, 1, 2, 2), 2, 0),
        ((2, 2, 6, 6), (1, 2, 3, 3), 3, 2),
    ])
    def test_matches_loop_oracle(self, xshape, wshape, stride, pad):
        x = RNG.standard_normal(xshape)
        w = RNG.standard_normal(wshape)
        b = RNG.standard_normal(wshape[0])
        out = ops.conv2d(t(x), t(w), t(b), stride, pad)
        ref = conv2d_reference(x, w, b, stride, pad)
        np.testing.assert_allclose(out.data, ref, atol=1e-12, rtol=0)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(ValueError, match="channel axis"):
            ops.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))), None, 1, 1)

    def test_too_small_spatial(self):
        with pytest.raises(ValueError, match="height axis"):
            ops.conv2d(t(np.zeros((1, 1, 2, 8))), t(np.zeros((1, 1, 3, 3))), None, 1, 0)

    def test_deterministic_bits(self):
        x = RNG.standard_normal((2, 3, 8, 8))
        w = RNG.standard_normal((4, 3, 3, 3))
        a = ops.conv2d(t(x), t(w), None, 1, 1).data
        b = ops.conv2d(t(x), t(w), None, 1, 1).data
        assert a.tobytes() == b.tobytes()

    def test_mixed_precision_rejected(self):
        x32 = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
        w64 = Tensor(np.zeros((1, 1, 3, 3), dtype=np.float64))
        with pytest.raises(TypeError, match="mixed precision"):
            ops.conv2d(x32, w64, None, 1, 1)


class TestConvTranspose2d:
    def test_identity_kernel(self):
        x = RNG.standard_normal((2, 1, 3, 3))
        w = np.ones((1, 1, 1, 1))
        out = ops.conv_transpose2d(t(x), t(w), t(np.zeros(1)), 1, 0)
        np.testing.assert_array_equal(out.data, x)

    def test_shape_formula(self):
        x = RNG.standard_normal((1, 1, 2, 2))
        w = RNG.standard_normal((1, 3, 2, 2))
        out = ops.conv_transpose2d(t(x), t(w), None, 2, 0)
        assert out.shape == (1, 3, 4, 4)

    @pytest.mark.parametrize("h,s,p,k", [(7, 2, 1, 3), (6, 1, 0, 3), (9, 2, 0, 3), (8, 2, 1, 2)])
    def test_adjoint_of_conv2d(self, h, s, p, k):
        # geometry chosen so the transposed output recovers the conv input shape
        assert (h + 2 * p - k) % s == 0
        x = RNG.standard_normal((2, 3, h, h))
        w = RNG.standard_normal((4, 3, k, k))
        oh = (h + 2 * p - k) // s + 1
        y = RNG.standard_normal((2, 4, oh, oh))
        lhs = float(np.sum(ops.conv2d(t(x), t(w), None, s, p).data * y))
        rhs = float(np.sum(x * ops.conv_transpose2d(t(y), t(w), None, s, p).data))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_matches_loop_oracle(self):
        x = RNG.standard_normal((2, 3, 4, 5))
        w = RNG.standard_normal((3, 2, 3, 3))
        b = RNG.standard_normal(2)
        out = ops.conv_transpose2d(t(x), t(w), t(b), 2, 1)
        ref = conv_transpose2d_reference(x, w, b, 2, 1)
        np.testing.assert_allclose(out.data, ref, atol=1e-12, rtol=0)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel axis"):
            ops.conv_transpose2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((3, 1, 2, 2))), None, 1, 0)


class TestDense:
    def test_identity(self):
        x = RNG.standard_normal((3, 4))
        out = ops.dense(t(x), t(np.eye(4)), t(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_broadcasts_bias(self):
        b = RNG.standard_normal(5)
        out = ops.dense(t(np.ones((3, 4))), t(np.zeros((5, 4))), t(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))

    def test_matches_loop_oracle(self):
        x = RNG.standard_normal((3, 4))
        w = RNG.standard_normal((2, 4))
        b = RNG.standard_normal(2)
        out = ops.dense(t(x), t(w), t(b))
        np.testing.assert_allclose(out.data, dense_reference(x, w, b), atol=1e-12, rtol=0)

    def test_inner_mismatch(self):
        with pytest.raises(ValueError, match="inner axis"):
            ops.dense(t(np.zeros((2, 3))), t(np.zeros((4, 5))), None)


class TestActivations:
    def test_relu_values(self):
        out = ops.relu(t([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert ops.sigmoid(t([0.0])).data[0] == 0.5

    @pytest.mark.parametrize("v", [-40.0, 40.0, -7.3, 12.9])
    def test_sigmoid_matches_high_precision(self, v):
        out = float(ops.sigmoid(t([v])).data[0])
        assert out == pytest.approx(sigmoid_scalar(v), abs=1e-12)
        assert 0.0 < out < 1.0

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_sigmoid_no_overflow_far_out(self, dtype):
        x = Tensor(np.array([-1e3, -40.0, 0.0, 40.0, 1e3], dtype=dtype))
        with np.errstate(over="raise"):
            out = ops.sigmoid(x).data
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_activation_dispatch(self):
        x = t([-1.0, 1.0])
        np.testing.assert_array_equal(ops.activation(x, "relu").data, [0.0, 1.0])
        with pytest.raises(ValueError, match="unknown activation"):
            ops.activation(x, "tanh")


class TestGlobalAvgPool:
    def test_constant_map(self):
        out = ops.global_avg_pool(t(np.full((2, 3, 4, 5), 2.5)))
        np.testing.assert_array_equal(out.data, np.full((2, 3), 2.5))

    def test_small_example(self):
        x = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
        assert ops.global_avg_pool(t(x)).data[0, 0] == 4.0

    def test_matches_loop_oracle(self):
        x = RNG.standard_normal((2, 4, 3, 5))
        out = ops.global_avg_pool(t(x))
        np.testing.assert_allclose(out.data, global_avg_pool_reference(x), atol=1e-12, rtol=0)


class TestUpsampleNearest:
    def test_factor_one_identity(self):
        x = RNG.standard_normal((1, 2, 3, 3))
        np.testing.assert_array_equal(ops.upsample_nearest(t(x), 1).data, x)

    def test_block_replication(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = ops.upsample_nearest(t(x), 2).data[0, 0]
        expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
        np.testing.assert_array_equal(out, expected)

    def test_matches_loop_oracle(self):
        x = RNG.standard_normal((2, 3, 3, 4))
        out = ops.upsample_nearest(t(x), 3)
        np.testing.assert_array_equal(out.data, upsample_nearest_reference(x, 3))

    def test_sum_gradient_is_factor_squared(self):
        from fednet.tensor import Tape, backward
        x = t(RNG.standard_normal((1, 2, 3, 3)), requires_grad=True)
        with Tape() as tape:
            s = ops.upsample_nearest(x, 3).sum()
        backward(s, tape)
        np.testing.assert_array_equal(x.grad, np.full(x.shape, 9.0))


class TestPixelShuffle:
    def test_r1_identity(self):
        x = RNG.standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(ops.pixel_shuffle(t(x), 1).data, x)

    def test_channel_to_position_convention(self):
        x = np.arange(4.0).reshape(1, 4, 1, 1)
        out = ops.pixel_shuffle(t(x), 2).data
        np.testing.assert_array_equal(out.reshape(2, 2), [[0.0, 1.0], [2.0, 3.0]])

    def test_shape_formula(self):
        x = RNG.standard_normal((2, 8, 3, 5))
        assert ops.pixel_shuffle(t(x), 2).shape == (2, 2, 6, 10)

    def test_matches_index_oracle(self):
        x = RNG.standard_normal((2, 18, 2, 3))
        out = ops.pixel_shuffle(t(x), 3)
        np.testing.assert_array_equal(out.data, pixel_shuffle_reference(x, 3))

    def test_indivisible_channels_rejected(self):
        with pytest.raises(ValueError, match="not divisible"):
            ops.pixel_shuffle(t(np.zeros((1, 6, 2, 2))), 2)


class TestPixelUnshuffle:
    def test_r1_identity(self):
        x = RNG.standard_normal((1, 2, 3, 3))
        np.testing.assert_array_equal(ops.pixel_unshuffle(t(x), 1).data, x)

    def test_shape(self):
        out = ops.pixel_unshuffle(t(np.zeros((1, 1, 4, 4))), 2)
        assert out.shape == (1, 4, 2, 2)

    def test_indivisible_extent_rejected(self):
        with pytest.raises(ValueError, match="not divisible"):
            ops.pixel_unshuffle(t(np.zeros((1, 1, 5, 4))), 2)

    @settings(max_examples=30, deadline=None)
    @given(r=st.integers(1, 3), c=st.integers(1, 3), h=st.integers(1, 4),
           w=st.integers(1, 4), seed=st.integers(0, 2 ** 31))
    def test_roundtrip_bit_exact(self, r, c, h, w, seed):
        x = np.random.default_rng(seed).standard_normal((2, c * r * r, h, w))
        back = ops.pixel_unshuffle(ops.pixel_shuffle(t(x), r), r).data
        assert back.tobytes() == x.tobytes()


class TestChannelScale:
    def test_scales_each_channel(self):
        x = np.ones((1, 2, 2, 2))
        g = np.array([[2.0, 3.0]])
        out = ops.channel_scale(t(x), t(g)).data
        np.testing.assert_array_equal(out[0, 0], np.full((2, 2), 2.0))
        np.testing.assert_array_equal(out[0, 1], np.full((2, 2), 3.0))

    def test_gate_shape_checked(self):
        with pytest.raises(ValueError, match="gate shape"):
            ops.channel_scale(t(np.zeros((1, 2, 2, 2))), t(np.zeros((1, 3))))

import numpy as np
import pytest

from sicnet.conv import ConvKernel, conv_standard, conv_standard_backward, grouped_conv, grouped_conv_backward
from sicnet.tensor import Tensor4

from reference import central_difference, conv2d_loops, group_mask, relative_error


def rng_tensor(rng, shape):
    return Tensor4(rng.standard_normal(shape))


class TestConvStandard:
    def test_1x1_scalar_scaling(self):
        x = Tensor4(np.ones((1, 1, 3, 3)))
        k = ConvKernel(np.full((1, 1, 1, 1), 2.0))
        np.testing.assert_array_equal(conv_standard(x, k).data, np.full((1, 1, 3, 3), 2.0))

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng_tensor(rng, (2, 3, 5, 5))
        w = np.zeros((3, 3, 3, 3))
        for j in range(3):
            w[j, j, 1, 1] = 1.0
        out = conv_standard(x, ConvKernel(w), pad=1)
        np.testing.assert_allclose(out.data, x.data, atol=1e-15)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(42)
        x = rng_tensor(rng, (1, 2, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3))
        out = conv_standard(x, ConvKernel(w), pad=1)
        expect = conv2d_loops(x.data, w, pad=1)
        assert np.max(np.abs(out.data - expect)) < 1e-12

    @pytest.mark.parametrize("seed", range(8))
    def test_loop_oracle_random_shapes(self, seed):
        rng = np.random.default_rng(seed)
        cin, cout = rng.integers(1, 5, size=2)
        k = int(rng.choice([1, 3, 5]))
        h, w = rng.integers(k, 8, size=2)
        stride = int(rng.choice([1, 2]))
        pad = int(rng.integers(0, 2))
        x = rng_tensor(rng, (2, cin, h, w))
        wk = rng.standard_normal((cout, cin, k, k))
        out = conv_standard(x, ConvKernel(wk), pad=pad, stride=stride)
        expect = conv2d_loops(x.data, wk, pad=pad, stride=stride)
        assert out.data.shape == expect.shape
        assert np.max(np.abs(out.data - expect)) < 1e-12

    def test_output_dims_formula(self):
        x = Tensor4(np.zeros((1, 1, 9, 7)))
        out = conv_standard(x, ConvKernel(np.zeros((1, 1, 3, 3))), pad=1, stride=2)
        assert (out.shape.height, out.shape.width) == ((9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv_standard(Tensor4(np.zeros((1, 2, 3, 3))), ConvKernel(np.zeros((1, 3, 1, 1))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ValueError):
            conv_standard(Tensor4(np.zeros((1, 1, 2, 2))), ConvKernel(np.zeros((1, 1, 5, 5))), pad=1)


class TestConvBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(1)
        x = rng_tensor(rng, (1, 2, 4, 4))
        k = ConvKernel(rng.standard_normal((2, 2, 3, 3)))
        gx, gw = conv_standard_backward(x, k, Tensor4.zeros((1, 2, 4, 4)), pad=1)
        assert not gx.data.any()
        assert not gw.any()

    def test_identity_kernel_passes_grad(self):
        rng = np.random.default_rng(2)
        x = rng_tensor(rng, (1, 2, 4, 4))
        w = np.zeros((2, 2, 3, 3))
        for j in range(2):
            w[j, j, 1, 1] = 1.0
        g = rng_tensor(rng, (1, 2, 4, 4))
        gx, _ = conv_standard_backward(x, ConvKernel(w), g, pad=1)
        np.testing.assert_allclose(gx.data, g.data, atol=1e-15)

    def test_finite_difference_every_weight(self):
        # Full sweep of a 1x2x3x3 kernel plus the input, central differences.
        rng = np.random.default_rng(3)
        x_arr = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((1, 2, 3, 3))
        g = rng.standard_normal((1, 1, 5, 5))
        kernel = ConvKernel(w)

        def loss():
            return float(np.sum(conv_standard(Tensor4(x_arr), kernel, pad=1).data * g))

        num_w, num_x = central_difference(loss, [w, x_arr])
        gx, gw = conv_standard_backward(Tensor4(x_arr), kernel, Tensor4(g), pad=1)
        assert relative_error(gw, num_w) < 1e-6
        assert relative_error(gx.data, num_x) < 1e-6

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (3, 2)])
    def test_finite_difference_strided(self, stride, pad):
        rng = np.random.default_rng(10 + stride)
        x_arr = rng.standard_normal((2, 2, 7, 7))
        w = rng.standard_normal((3, 2, 3, 3))
        kernel = ConvKernel(w)
        out = conv_standard(Tensor4(x_arr), kernel, pad=pad, stride=stride)
        g = rng.standard_normal(out.data.shape)

        def loss():
            return float(np.sum(conv_standard(Tensor4(x_arr), kernel, pad=pad, stride=stride).data * g))

        num_w, num_x = central_difference(loss, [w, x_arr])
        gx, gw = conv_standard_backward(Tensor4(x_arr), kernel, Tensor4(g), pad=pad, stride=stride)
        assert relative_error(gw, num_w) < 1e-6
        assert relative_error(gx.data, num_x) < 1e-6


class TestGroupedConv:
    def test_groups_1_matches_standard(self):
        rng = np.random.default_rng(4)
        x = rng_tensor(rng, (2, 4, 5, 5))
        k = ConvKernel(rng.standard_normal((4, 4, 3, 3)))
        np.testing.assert_array_equal(
            grouped_conv(x, k, groups=1, pad=1).data, conv_standard(x, k, pad=1).data
        )

    def test_groups_n_k1_is_per_channel_scaling(self):
        rng = np.random.default_rng(5)
        x = rng_tensor(rng, (1, 4, 3, 3))
        w = rng.standard_normal((4, 4, 1, 1))
        out = grouped_conv(x, ConvKernel(w), groups=4)
        expect = x.data * np.array([w[j, j, 0, 0] for j in range(4)])[None, :, None, None]
        np.testing.assert_allclose(out.data, expect, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_masked_dense_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng_tensor(rng, (2, 8, 4, 4))
        w = rng.standard_normal((8, 8, 3, 3))
        mask = group_mask(8, 8, 4)
        masked = w * mask[:, :, None, None]
        out = grouped_conv(x, ConvKernel(w), groups=4, pad=1)
        expect = conv_standard(x, ConvKernel(masked), pad=1)
        assert np.max(np.abs(out.data - expect.data)) < 1e-12

    def test_divisibility_error(self):
        with pytest.raises(ValueError):
            grouped_conv(Tensor4(np.zeros((1, 6, 3, 3))), ConvKernel(np.zeros((6, 6, 1, 1))), groups=4)

    def test_backward_finite_difference(self):
        rng = np.random.default_rng(6)
        x_arr = rng.standard_normal((1, 4, 4, 4))
        w = rng.standard_normal((4, 4, 3, 3))
        kernel = ConvKernel(w)
        g = rng.standard_normal((1, 4, 4, 4))

        def loss():
            return float(np.sum(grouped_conv(Tensor4(x_arr), kernel, groups=2, pad=1).data * g))

        num_w, num_x = central_difference(loss, [w, x_arr])
        gx, gw = grouped_conv_backward(Tensor4(x_arr), kernel, 2, Tensor4(g), pad=1)
        assert relative_error(gw, num_w) < 1e-6
        assert relative_error(gx.data, num_x) < 1e-6
        # Gradients of never-read off-block weights stay exactly zero.
        assert not gw[~group_mask(4, 4, 2)].any()

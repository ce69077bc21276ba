import numpy as np
import pytest

from sicnet.basic import BatchNormState, batchnorm_forward
from sicnet.blocks import (
    ChannelBottleneckParams,
    SicIteration,
    UnraveledKernel,
    channelwise_bottleneck_block,
    multi_filter_conv,
    sic_layer_backward,
    sic_layer_forward,
    spatial_bottleneck_forward,
    unraveled_conv,
)
from sicnet.conv import ConvKernel, conv_standard
from sicnet.intra import (
    IntraChannelKernel,
    ProjectionMatrix,
    intra_channel_conv,
    intra_channel_deconv,
    linear_projection,
)
from sicnet.tensor import Tensor4, add, crop, pad, relu, zero_pad


def sic_iter(rng, n, k, with_norm=False, scale=1.0):
    return SicIteration(
        IntraChannelKernel(rng.standard_normal((n, k, k)) * scale),
        ProjectionMatrix(rng.standard_normal((n, n)) * scale),
        BatchNormState.identity(n) if with_norm else None,
    )


class TestSicLayer:
    def test_double_on_identity_params(self):
        # one iteration, k=1 weight 1, identity projection, no norm:
        # out = relu(x + x) = 2x for non-negative x
        rng = np.random.default_rng(0)
        x = Tensor4(np.abs(rng.standard_normal((2, 3, 4, 4))))
        it = SicIteration(
            IntraChannelKernel(np.ones((3, 1, 1))), ProjectionMatrix(np.eye(3)), None
        )
        out = sic_layer_forward(x, [it])
        np.testing.assert_allclose(out.data, 2 * x.data, atol=1e-14)

    def test_zero_projection_is_identity_on_nonnegative(self):
        rng = np.random.default_rng(1)
        x = Tensor4(np.abs(rng.standard_normal((1, 4, 5, 5))))
        it = SicIteration(
            IntraChannelKernel(rng.standard_normal((4, 3, 3))), ProjectionMatrix(np.zeros((4, 4)))
        )
        np.testing.assert_array_equal(sic_layer_forward(x, [it]).data, x.data)

    @pytest.mark.parametrize("seed", range(5))
    def test_two_iterations_match_primitive_composition(self, seed):
        rng = np.random.default_rng(100 + seed)
        n, k = 4, 3
        its = [sic_iter(rng, n, k, with_norm=True) for _ in range(2)]
        x = Tensor4(rng.standard_normal((2, n, 5, 5)))

        current = x
        for it in its:
            spatial = intra_channel_conv(current, it.conv, pad=(k - 1) // 2)
            projected = linear_projection(spatial, it.project)
            normed = batchnorm_forward(projected, it.norm, train_mode=True, update_running=False)
            current = relu(add(current, normed))

        out = sic_layer_forward(x, its, train_mode=True)
        assert np.max(np.abs(out.data - current.data)) < 1e-12

    def test_even_kernel_rejected(self):
        it = SicIteration(IntraChannelKernel(np.ones((2, 2, 2))), ProjectionMatrix(np.eye(2)))
        with pytest.raises(ValueError):
            sic_layer_forward(Tensor4(np.ones((1, 2, 4, 4))), [it])

    def test_nonsquare_kernel_rejected(self):
        it = SicIteration(IntraChannelKernel(np.ones((2, 1, 3))), ProjectionMatrix(np.eye(2)))
        with pytest.raises(ValueError):
            sic_layer_forward(Tensor4(np.ones((1, 2, 4, 4))), [it])

    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(2)
        its = [sic_iter(rng, 3, 3) for _ in range(2)]
        x = Tensor4(rng.standard_normal((1, 3, 4, 4)))
        gx, grads = sic_layer_backward(x, its, Tensor4.zeros((1, 3, 4, 4)))
        assert not gx.data.any()
        for g in grads:
            assert not g.conv.any() and not g.project.any()

    def test_zero_projection_grad_input_is_masked_upstream(self):
        # with all projections zero and no norm the layer is relu(x), so the
        # input gradient must be the upstream gradient masked by x > 0
        rng = np.random.default_rng(3)
        x = Tensor4(rng.standard_normal((2, 3, 4, 4)))
        it = SicIteration(
            IntraChannelKernel(rng.standard_normal((3, 3, 3))), ProjectionMatrix(np.zeros((3, 3)))
        )
        g = Tensor4(rng.standard_normal((2, 3, 4, 4)))
        gx, _ = sic_layer_backward(x, [it], g)
        np.testing.assert_allclose(gx.data, g.data * (x.data > 0), atol=1e-14)


class TestUnraveledConv:
    def test_b1_equals_single_sic_iteration(self):
        rng = np.random.default_rng(4)
        n, k = 3, 3
        w = rng.standard_normal((n, 1, k, k))
        p = rng.standard_normal((n, n))
        x = Tensor4(rng.standard_normal((2, n, 5, 5)))
        out = unraveled_conv(x, UnraveledKernel(w), ProjectionMatrix(p))
        it = SicIteration(IntraChannelKernel(w[:, 0]), ProjectionMatrix(p))
        assert np.max(np.abs(out.data - sic_layer_forward(x, [it]).data)) < 1e-12

    def test_delta_basis_reproduces_dense_conv(self):
        # with b = k*k filters forming the shifted-delta basis and the
        # projection carrying the dense weights, the linear part equals a
        # standard convolution, so the residual+ReLU outputs agree too
        rng = np.random.default_rng(5)
        n, k = 3, 3
        dense = rng.standard_normal((n, n, k, k))
        filters = np.zeros((n, k * k, k, k))
        project = np.zeros((n * k * k, n))
        for j in range(n):
            for t in range(k * k):
                u, v = divmod(t, k)
                filters[j, t, u, v] = 1.0
                for o in range(n):
                    project[j * k * k + t, o] = dense[o, j, u, v]
        x = Tensor4(rng.standard_normal((2, n, 6, 6)))
        ours = unraveled_conv(x, UnraveledKernel(filters), ProjectionMatrix(project))
        expect = relu(add(x, conv_standard(x, ConvKernel(dense), pad=(k - 1) // 2)))
        assert np.max(np.abs(ours.data - expect.data)) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_primitive_composition(self, seed):
        rng = np.random.default_rng(200 + seed)
        n, b, k = 4, 3, 3
        kern = UnraveledKernel(rng.standard_normal((n, b, k, k)))
        p = ProjectionMatrix(rng.standard_normal((n * b, n)))
        x = Tensor4(rng.standard_normal((2, n, 5, 5)))
        widened = multi_filter_conv(x, kern, pad=(k - 1) // 2)
        expect = relu(add(x, linear_projection(widened, p)))
        out = unraveled_conv(x, kern, p)
        assert np.max(np.abs(out.data - expect.data)) < 1e-12

    def test_projection_row_mismatch(self):
        with pytest.raises(ValueError):
            unraveled_conv(
                Tensor4(np.ones((1, 2, 4, 4))),
                UnraveledKernel(np.ones((2, 3, 3, 3))),
                ProjectionMatrix(np.ones((5, 2))),
            )

    def test_widened_channel_order_is_channel_major(self):
        # source channel j's filters occupy slots j*b .. j*b+b-1
        rng = np.random.default_rng(6)
        x = Tensor4(rng.standard_normal((1, 2, 4, 4)))
        w = np.zeros((2, 2, 1, 1))
        w[0, 0], w[0, 1], w[1, 0], w[1, 1] = 1.0, 2.0, 3.0, 4.0
        out = multi_filter_conv(x, UnraveledKernel(w))
        np.testing.assert_allclose(out.data[:, 0], x.data[:, 0], atol=1e-15)
        np.testing.assert_allclose(out.data[:, 1], 2 * x.data[:, 0], atol=1e-15)
        np.testing.assert_allclose(out.data[:, 2], 3 * x.data[:, 1], atol=1e-15)
        np.testing.assert_allclose(out.data[:, 3], 4 * x.data[:, 1], atol=1e-15)


class TestSpatialBottleneck:
    def test_k1_unit_kernels_reduce_to_projection(self):
        rng = np.random.default_rng(7)
        n = 3
        x = Tensor4(rng.standard_normal((2, n, 4, 4)))
        one = IntraChannelKernel(np.ones((n, 1, 1)), stride=1)
        p = ProjectionMatrix(rng.standard_normal((n, n)))
        out = spatial_bottleneck_forward(x, one, p, one, pad=0)
        expect = relu(add(x, linear_projection(x, p)))
        np.testing.assert_array_equal(out.data, expect.data)

    def test_shape_chain_36_to_18_to_36(self):
        rng = np.random.default_rng(8)
        n, k = 2, 2
        x = Tensor4(rng.standard_normal((1, n, 36, 36)))
        ck = IntraChannelKernel(rng.standard_normal((n, k, k)), stride=k)
        reduced = intra_channel_conv(x, ck, pad=0)
        assert (reduced.shape.height, reduced.shape.width) == (18, 18)
        out = spatial_bottleneck_forward(
            x, ck, ProjectionMatrix(rng.standard_normal((n, n))),
            IntraChannelKernel(rng.standard_normal((n, k, k)), stride=k), pad=0,
        )
        assert (out.shape.height, out.shape.width) == (36, 36)

    @pytest.mark.parametrize("pad,h", [(0, 8), (1, 8), (0, 6), (1, 6)])
    def test_matches_primitive_composition(self, pad, h):
        rng = np.random.default_rng(300 + pad * 10 + h)
        n, k = 3, 2
        x = Tensor4(rng.standard_normal((2, n, h, h)))
        ck = IntraChannelKernel(rng.standard_normal((n, k, k)), stride=k)
        dk = IntraChannelKernel(rng.standard_normal((n, k, k)), stride=k)
        p = ProjectionMatrix(rng.standard_normal((n, n)))
        norm = BatchNormState.identity(n)

        padded = zero_pad(x, pad, pad, pad, pad)
        reduced = intra_channel_conv(padded, ck, pad=0)
        restored = intra_channel_deconv(linear_projection(reduced, p), dk)
        cropped = crop(restored, pad, pad, pad, pad) if pad else restored
        normed = batchnorm_forward(cropped, norm, train_mode=True, update_running=False)
        expect = relu(add(x, normed))

        out = spatial_bottleneck_forward(x, ck, p, dk, pad=pad, norm=norm, train_mode=True)
        assert np.max(np.abs(out.data - expect.data)) < 1e-12

    def test_uneven_tiling_pads_bottom_right(self):
        # 5x5 with k=2, pad=0: one extra zero row/col bottom-right makes the
        # stride tile; the output still matches the input resolution
        rng = np.random.default_rng(9)
        n, k = 2, 2
        x = Tensor4(rng.standard_normal((1, n, 5, 5)))
        out = spatial_bottleneck_forward(
            x,
            IntraChannelKernel(rng.standard_normal((n, k, k)), stride=k),
            ProjectionMatrix(rng.standard_normal((n, n))),
            IntraChannelKernel(rng.standard_normal((n, k, k)), stride=k),
            pad=0,
        )
        assert (out.shape.height, out.shape.width) == (5, 5)

    def test_kernel_too_large(self):
        with pytest.raises(ValueError):
            spatial_bottleneck_forward(
                Tensor4(np.ones((1, 1, 2, 2))),
                IntraChannelKernel(np.ones((1, 4, 4)), stride=4),
                ProjectionMatrix(np.eye(1)),
                IntraChannelKernel(np.ones((1, 4, 4)), stride=4),
                pad=0,
            )


class TestChannelBottleneck:
    def params(self, rng, n, k=3, zero_expand=False, with_norm=False):
        half = n // 2
        return ChannelBottleneckParams(
            reduce_conv=IntraChannelKernel(rng.standard_normal((n, k, k))),
            reduce_project=ProjectionMatrix(rng.standard_normal((n, half))),
            expand_conv=IntraChannelKernel(rng.standard_normal((half, k, k))),
            expand_project=ProjectionMatrix(
                np.zeros((half, n)) if zero_expand else rng.standard_normal((half, n))
            ),
            reduce_norm=BatchNormState.identity(half) if with_norm else None,
            expand_norm=BatchNormState.identity(n) if with_norm else None,
        )

    def test_zero_expand_projection_is_pure_residual(self):
        rng = np.random.default_rng(10)
        x = Tensor4(np.abs(rng.standard_normal((2, 4, 5, 5))))
        out = channelwise_bottleneck_block(x, self.params(rng, 4, zero_expand=True))
        np.testing.assert_array_equal(out.data, x.data)

    def test_odd_channels_rejected(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ValueError):
            channelwise_bottleneck_block(Tensor4(np.ones((1, 3, 4, 4))), self.params(rng, 4))

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_primitive_composition(self, seed):
        rng = np.random.default_rng(400 + seed)
        n, k = 6, 3
        params = self.params(rng, n, k, with_norm=True)
        x = Tensor4(rng.standard_normal((2, n, 5, 5)))

        r = intra_channel_conv(x, params.reduce_conv, pad=1)
        r = linear_projection(r, params.reduce_project)
        r = batchnorm_forward(r, params.reduce_norm, True, update_running=False)
        narrow = relu(r)
        e = intra_channel_conv(narrow, params.expand_conv, pad=1)
        e = linear_projection(e, params.expand_project)
        e = batchnorm_forward(e, params.expand_norm, True, update_running=False)
        expect = relu(add(x, e))

        out = channelwise_bottleneck_block(x, params, train_mode=True)
        assert np.max(np.abs(out.data - expect.data)) < 1e-12

import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))
import tensor
from tensor import (
    ConvSpec,
    NonFiniteError,
    ShapeError,
    adaptive_avg_pool,
    concat_channels,
    conv2d,
    elementwise,
    gelu,
    layer_norm_channels,
    matmul,
    pixel_shuffle,
    pixel_unshuffle,
    reflect_pad_to_multiple,
    softmax_lastdim,
    split_channels,
)


def direct_conv(x, w, b, spec):
    # tap-by-tap direct summation
    n, _, h, wd = x.shape
    p, d, s, k = spec.padding, spec.dilation, spec.stride, spec.kernel
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    h_out, w_out = spec.output_hw(h, wd)
    cin_g = spec.in_channels // spec.groups
    cout_g = spec.out_channels // spec.groups
    out = np.zeros((n, spec.out_channels, h_out, w_out))
    for o in range(spec.out_channels):
        group = o // cout_g
        for c in range(cin_g):
            for i in range(k):
                for j in range(k):
                    window = xp[:, group * cin_g + c, i * d:i * d + s * (h_out - 1) + 1:s,
                                j * d:j * d + s * (w_out - 1) + 1:s]
                    out[:, o] += w[o, c, i, j] * window
        if b is not None:
            out[:, o] += b[o]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestConvSpec:

    def test_same_padding_arithmetic(self):
        assert [ConvSpec.same(4, 4, k, d).padding for k, d in [(1, 1), (3, 3), (5, 3), (7, 3)]] == [0, 3, 6, 9]

    def test_rejects_even_kernel(self):
        with pytest.raises(ShapeError):
            ConvSpec(4, 4, kernel=2)

    def test_rejects_indivisible_groups(self):
        with pytest.raises(ShapeError):
            ConvSpec(6, 4, kernel=3, groups=4)

    def test_param_count_of_stem(self):
        assert ConvSpec.same(3, 24, kernel=3).param_count == 672

    def test_pointwise_flops(self):
        c, h, w = 8, 16, 16
        assert ConvSpec(c, c).flops(h, w) == 2 * c * c * h * w


class TestConv2d:

    def test_identity_pointwise_kernel(self, rng):
        x = rng.normal(size=(2, 5, 6, 7))
        w = np.eye(5).reshape(5, 5, 1, 1)
        out = conv2d(x, w, None, ConvSpec(5, 5, bias=False))
        np.testing.assert_array_equal(out, x)

    def test_all_ones_by_hand(self):
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 1, 3, 3))
        out = conv2d(x, w, None, ConvSpec(1, 1, kernel=3, padding=1, bias=False))
        expected = np.array([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
        np.testing.assert_array_equal(out[0, 0], expected)

    def test_dilated_same_size(self, rng):
        spec = ConvSpec(2, 2, kernel=3, padding=3, dilation=3)
        out = conv2d(rng.normal(size=(1, 2, 16, 16)), rng.normal(size=spec.weight_shape), None, spec)
        assert out.shape == (1, 2, 16, 16)

    @pytest.mark.parametrize("kernel,dilation,depthwise", [(1, 1, False), (3, 3, True), (5, 3, True), (7, 3, True),
                                                           (3, 1, False), (3, 2, False)])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_direct_summation(self, kernel, dilation, depthwise, seed):
        rng = np.random.default_rng(seed)
        c = 8
        spec = ConvSpec.same(c, c, kernel, dilation, groups=c if depthwise else 1)
        x = rng.normal(size=(4, c, 9, 9))
        w = rng.normal(size=spec.weight_shape)
        b = rng.normal(size=c)
        assert np.max(np.abs(conv2d(x, w, b, spec) - direct_conv(x, w, b, spec))) < 1e-12

    @pytest.mark.parametrize("spec", [ConvSpec(4, 6, kernel=3, stride=2, padding=1, groups=2),
                                      ConvSpec(4, 4, kernel=5, stride=2, padding=1, dilation=2, groups=4),
                                      ConvSpec(4, 8, kernel=1, stride=2)])
    def test_strided_and_grouped_match_direct_summation(self, rng, spec):
        x = rng.normal(size=(2, 4, 9, 8))
        w = rng.normal(size=spec.weight_shape)
        b = rng.normal(size=spec.out_channels)
        out = conv2d(x, w, b, spec)
        assert out.shape[2:] == spec.output_hw(9, 8)
        assert np.max(np.abs(out - direct_conv(x, w, b, spec))) < 1e-12

    def test_channel_mismatch(self, rng):
        spec = ConvSpec(4, 4, kernel=3, padding=1)
        with pytest.raises(ShapeError):
            conv2d(rng.normal(size=(1, 3, 8, 8)), rng.normal(size=spec.weight_shape), None, spec)

    def test_kernel_larger_than_padded_input(self, rng):
        spec = ConvSpec(1, 1, kernel=5)
        with pytest.raises(ShapeError):
            conv2d(rng.normal(size=(1, 1, 3, 3)), rng.normal(size=spec.weight_shape), None, spec)

    def test_is_pure(self, rng):
        spec = ConvSpec.same(4, 4, kernel=5, dilation=3, groups=4)
        x = rng.normal(size=(1, 4, 9, 9))
        w = rng.normal(size=spec.weight_shape)
        x_before = x.copy()
        first = conv2d(x, w, None, spec)
        second = conv2d(x, w, None, spec)
        np.testing.assert_array_equal(first, second)
        np.testing.assert_array_equal(x, x_before)

    def test_float32_stays_float32(self, rng):
        spec = ConvSpec.same(3, 4, kernel=3)
        out = conv2d(rng.normal(size=(1, 3, 6, 6)).astype(np.float32),
                     rng.normal(size=spec.weight_shape).astype(np.float32),
                     np.zeros(4, dtype=np.float32), spec)
        assert out.dtype == np.float32


class TestMatmul:

    def test_identity(self, rng):
        b = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(matmul(np.eye(3), b), b)

    def test_hand_product(self):
        out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out, [[19.0, 22.0], [43.0, 50.0]])

    def test_inner_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((4, 2)))


class TestSoftmax:

    def test_symmetric_row(self):
        np.testing.assert_allclose(softmax_lastdim(np.zeros((1, 2))), [[0.5, 0.5]])

    def test_log_two_row(self):
        np.testing.assert_allclose(softmax_lastdim(np.array([[math.log(2.0), 0.0]]), 1.0),
                                   [[2.0 / 3.0, 1.0 / 3.0]], rtol=1e-12)

    def test_zero_scale_is_uniform(self, rng):
        out = softmax_lastdim(rng.normal(size=(3, 7)), 0.0)
        np.testing.assert_allclose(out, np.full((3, 7), 1.0 / 7.0))

    def test_rows_sum_to_one(self, rng):
        out = softmax_lastdim(rng.normal(size=(2, 5, 9)) * 30, 1.3)
        assert np.all(out >= 0)
        assert np.max(np.abs(out.sum(axis=-1) - 1.0)) < 1e-6

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(4, 6))
        np.testing.assert_allclose(softmax_lastdim(x + 100.0), softmax_lastdim(x), atol=1e-12)

    def test_empty_row(self):
        with pytest.raises(ShapeError):
            softmax_lastdim(np.zeros((2, 0)))


class TestLayerNorm:

    def test_constant_vector_gives_zeros(self):
        x = np.full((1, 4, 3, 3), 2.5)
        out = layer_norm_channels(x, np.ones(4), np.zeros(4))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_affine_dominates(self, rng):
        out = layer_norm_channels(rng.normal(size=(2, 3, 4, 4)), np.zeros(3), np.full(3, 5.0))
        np.testing.assert_array_equal(out, 5.0)

    def test_two_channel_vector(self):
        x = np.array([1.0, 3.0]).reshape(1, 2, 1, 1)
        out = layer_norm_channels(x, np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out.reshape(-1), [-1.0, 1.0], atol=1e-9)

    def test_normalized_statistics(self, rng):
        out = layer_norm_channels(rng.normal(scale=3.0, size=(2, 16, 5, 5)), np.ones(16), np.zeros(16))
        assert np.max(np.abs(out.mean(axis=1))) < 1e-6
        assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-4

    def test_affine_length_checked(self, rng):
        with pytest.raises(ShapeError):
            layer_norm_channels(rng.normal(size=(1, 3, 2, 2)), np.ones(2), np.zeros(2))


class TestAdaptivePool:

    def test_constant_map(self):
        np.testing.assert_array_equal(adaptive_avg_pool(np.full((1, 2, 5, 3), 0.25)), 0.25)

    def test_two_by_two_mean(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        assert adaptive_avg_pool(x)[0, 0, 0, 0] == 2.5

    def test_target_size_is_identity(self, rng):
        x = rng.normal(size=(2, 3, 1, 1))
        np.testing.assert_array_equal(adaptive_avg_pool(x, (1, 1)), x)

    def test_larger_grid_uses_bins(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(adaptive_avg_pool(x, (2, 2))[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_empty_spatial_extent(self):
        with pytest.raises(ShapeError):
            adaptive_avg_pool(np.zeros((1, 2, 0, 3)))


class TestPixelShuffle:

    def test_factor_one_is_identity(self, rng):
        x = rng.normal(size=(1, 3, 4, 5))
        np.testing.assert_array_equal(pixel_unshuffle(x, 1), x)
        np.testing.assert_array_equal(pixel_shuffle(x, 1), x)

    def test_index_enumeration(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = pixel_unshuffle(x, 2)
        assert out.shape == (1, 4, 2, 2)
        np.testing.assert_array_equal(out[0, 0], [[0.0, 2.0], [8.0, 10.0]])
        np.testing.assert_array_equal(out[0, 3], [[5.0, 7.0], [13.0, 15.0]])

    def test_round_trip_is_bit_exact(self, rng):
        x = rng.normal(size=(2, 3, 8, 6))
        np.testing.assert_array_equal(pixel_shuffle(pixel_unshuffle(x, 2), 2), x)

    def test_divisibility(self):
        with pytest.raises(ShapeError):
            pixel_unshuffle(np.zeros((1, 1, 5, 4)), 2)
        with pytest.raises(ShapeError):
            pixel_shuffle(np.zeros((1, 6, 2, 2)), 2)


class TestConcatSplit:

    def test_shape_contract(self):
        assert concat_channels([np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 4, 4))]).shape == (1, 5, 4, 4)

    def test_split_inverts_concat(self, rng):
        a, b = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 5, 3, 3))
        first, second = split_channels(concat_channels([a, b]), [2, 5])
        np.testing.assert_array_equal(first, a)
        np.testing.assert_array_equal(second, b)

    def test_mismatched_height(self):
        with pytest.raises(ShapeError):
            concat_channels([np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 5, 4))])


class TestElementwise:

    def test_add_zero(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        np.testing.assert_array_equal(elementwise("add", x, 0.0), x)

    def test_gelu_center(self):
        assert gelu(np.array(0.0)) == 0.0

    def test_gelu_of_three(self):
        assert float(elementwise("gelu", np.array(3.0))) == pytest.approx(2.99595, abs=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            elementwise("mul", np.ones((1, 2, 3, 3)), np.ones((1, 3, 3, 3)))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise("pow", np.ones(2), np.ones(2))


class TestDebugMode:

    def test_non_finite_detected_in_debug(self):
        tensor.set_debug(True)
        try:
            with pytest.raises(NonFiniteError):
                tensor.add(np.array([1.0, np.inf]), np.array([0.0, 0.0]))
        finally:
            tensor.set_debug(False)

    def test_non_finite_passes_without_debug(self):
        tensor.set_debug(False)
        assert np.isinf(tensor.add(np.array([np.inf]), np.array([0.0]))[0])


class TestReflectPad:

    def test_pads_to_next_multiple(self, rng):
        x = rng.normal(size=(1, 3, 50, 50))
        padded, original = reflect_pad_to_multiple(x, 4)
        assert padded.shape == (1, 3, 52, 52)
        assert original == (50, 50)
        np.testing.assert_array_equal(padded[:, :, :50, :50], x)

    def test_multiple_is_untouched(self, rng):
        x = rng.normal(size=(1, 3, 8, 12))
        padded, _ = reflect_pad_to_multiple(x, 4)
        assert padded is x

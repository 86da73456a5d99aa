"""3-d convolution, dense layers, extractor and initialization."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from helpers import assert_gradients, param, reduce

from jointattn import tensor as tn
from jointattn.errors import ConfigError, DimensionError
from jointattn.layers import (
    Conv3dLayer,
    DenseLayer,
    PreConvExtractor,
    conv3d,
    conv3d_forward,
    dense_forward,
    extract_features,
    init_params,
)
from jointattn.tensor import Tensor


def conv3d_oracle(x, w, b):
    """Direct same-padded convolution of a C_in x T x H x W volume, before relu."""
    ci, T, H, W = x.shape
    co, _, kt, kh, kw = w.shape
    out = np.zeros((co, T, H, W))
    for o in range(co):
        for t in range(T):
            for i in range(H):
                for j in range(W):
                    acc = b[o]
                    for c in range(ci):
                        for dt in range(kt):
                            for di in range(kh):
                                for dj in range(kw):
                                    tt, ii, jj = t + dt - kt // 2, i + di - kh // 2, j + dj - kw // 2
                                    if 0 <= tt < T and 0 <= ii < H and 0 <= jj < W:
                                        acc += w[o, c, dt, di, dj] * x[c, tt, ii, jj]
                    out[o, t, i, j] = acc
    return out


def _layer(w, b):
    layer = Conv3dLayer(w.shape[1], w.shape[0], w.shape[2:])
    layer.weight.data = np.asarray(w, dtype=np.float64)
    layer.bias.data = np.asarray(b, dtype=np.float64)
    return layer


class TestConv3d:
    def test_identity_kernel_is_relu(self, rng):
        x = rng.normal(size=(1, 2, 3, 4))
        y = conv3d_forward(Tensor(x), _layer(np.ones((1, 1, 1, 1, 1)), [0.0]))
        np.testing.assert_array_equal(y.data, np.maximum(x, 0))

    def test_all_ones_center_counts_volume(self):
        b = 0.25
        y = conv3d_forward(Tensor(np.ones((1, 3, 3, 3))), _layer(np.ones((1, 1, 3, 3, 3)), [b]))
        assert y.data[0, 1, 1, 1] == 27 + b

    def test_random_against_direct_loops(self, rng):
        x = rng.normal(size=(2, 4, 5, 5))
        w, b = rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
        y = conv3d_forward(Tensor(x), _layer(w, b))
        np.testing.assert_allclose(y.data, np.maximum(conv3d_oracle(x, w, b), 0), rtol=0, atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv3d_forward(Tensor(np.zeros((3, 2, 2, 2))), Conv3dLayer(2, 1))

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 1000))
    def test_same_padding_preserves_shape(self, T, H, W, seed):
        layer = Conv3dLayer(2, 3, seed=seed)
        x = Tensor(np.random.default_rng(seed).normal(size=(2, T, H, W)))
        assert conv3d_forward(x, layer).shape == (3, T, H, W)

    @given(st.floats(0.01, 100.0), st.integers(0, 1000))
    def test_positive_homogeneity_without_bias(self, alpha, seed):
        r = np.random.default_rng(seed)
        layer = _layer(r.normal(size=(2, 2, 3, 3, 3)), np.zeros(2))
        x = r.normal(size=(2, 3, 4, 4))
        y1 = conv3d_forward(Tensor(alpha * x), layer).data
        y2 = alpha * conv3d_forward(Tensor(x), layer).data
        np.testing.assert_allclose(y1, y2, rtol=1e-10, atol=1e-10)

    def test_batched_channels_last_matches_oracle(self, rng):
        x = rng.normal(size=(2, 3, 4, 4, 2))
        w, b = rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
        y = conv3d(Tensor(x), Tensor(w), Tensor(b)).data
        for n in range(2):
            ref = conv3d_oracle(x[n].transpose(3, 0, 1, 2), w, b)
            np.testing.assert_allclose(y[n].transpose(3, 0, 1, 2), ref, atol=1e-10)

    def test_gradients_match_finite_differences(self, rng):
        x = param(rng.uniform(-2, 2, (2, 3, 4, 4, 2)))
        w = param(rng.uniform(-1, 1, (2, 2, 3, 3, 3)))
        b = param(rng.uniform(-1, 1, 2))
        assert_gradients(lambda: reduce(conv3d(x, w, b), np.random.default_rng(5)), {"x": x, "w": w, "b": b})

    def test_relu_layer_gradients(self, rng):
        layer = Conv3dLayer(2, 2, seed=3)
        layer.bias.data = rng.uniform(0.1, 0.5, 2)
        x = param(rng.uniform(-2, 2, (1, 2, 3, 3, 2)))
        assert_gradients(lambda: reduce(layer(x), np.random.default_rng(9)),
                         {"x": x, "w": layer.weight, "b": layer.bias})

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            conv3d(Tensor(np.zeros((1, 2, 2, 2, 1))), Tensor(np.zeros((1, 1, 2, 3, 3))), Tensor(np.zeros(1)))


class TestDense:
    def test_zero_weights_give_bias(self):
        layer = DenseLayer(3, 2)
        layer.weight.data[:] = 0
        layer.bias.data = np.array([-1.0, 2.0])
        x = Tensor([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(dense_forward(x, layer, "none").data, [-1.0, 2.0])
        np.testing.assert_array_equal(dense_forward(x, layer, "relu").data, [0.0, 2.0])

    def test_identity(self, rng):
        layer = DenseLayer(4, 4)
        layer.weight.data = np.eye(4)
        x = rng.normal(size=4)
        np.testing.assert_array_equal(dense_forward(Tensor(x), layer).data, x)

    def test_random_against_matmul(self, rng):
        layer = DenseLayer(5, 3, seed=2)
        layer.bias.data = rng.normal(size=3)
        x = rng.normal(size=(4, 5))
        expected = x @ layer.weight.data.T + layer.bias.data
        np.testing.assert_allclose(dense_forward(Tensor(x), layer).data, expected, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            dense_forward(Tensor(np.zeros(4)), DenseLayer(3, 2))

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            dense_forward(Tensor(np.zeros(3)), DenseLayer(3, 2), "gelu")


class TestExtractor:
    def test_shapes(self, rng):
        ex = PreConvExtractor(32, seed=0)
        shallow, deep = extract_features(Tensor(rng.uniform(0, 1, (3, 1, 64, 64))), ex)
        assert shallow.shape == deep.shape == (3, 64, 32)

    def test_zero_frames_give_relu_of_biases(self):
        ex = PreConvExtractor(8, seed=0)
        shallow, deep = extract_features(Tensor(np.zeros((2, 1, 32, 32))), ex)
        # biases start at zero, so every stage stays at relu(0) = 0
        assert not np.any(shallow.data) and not np.any(deep.data)

    def test_deterministic(self, rng):
        frames = Tensor(rng.uniform(0, 1, (2, 1, 32, 32)))
        a = extract_features(frames, PreConvExtractor(8, seed=4))
        b = extract_features(frames, PreConvExtractor(8, seed=4))
        for x, y in zip(a, b):
            assert x.data.tobytes() == y.data.tobytes()

    def test_branches_differ_and_are_nonnegative(self, rng):
        shallow, deep = extract_features(Tensor(rng.uniform(0, 1, (2, 1, 32, 32))), PreConvExtractor(8, seed=1))
        assert not np.allclose(shallow.data, deep.data)
        assert shallow.data.min() >= 0 and deep.data.min() >= 0

    def test_frozen_by_default(self):
        ex = PreConvExtractor(8, seed=0)
        assert not any(p.requires_grad for _, p in ex.named_parameters())
        assert all(p.requires_grad for _, p in PreConvExtractor(8, seed=0, trainable=True).named_parameters())

    @pytest.mark.parametrize("size", [36, 30])
    def test_indivisible_size(self, size):
        with pytest.raises(ConfigError):
            PreConvExtractor(8).grid_size(size, size)

    def test_non_square(self):
        with pytest.raises(ConfigError):
            PreConvExtractor(8).grid_size(32, 64)


class TestInit:
    def test_within_bound(self):
        w = init_params((7, 5), seed=0).data
        assert np.all(np.abs(w) <= np.sqrt(6.0 / 12))

    def test_conv_fans(self):
        w = init_params((4, 3, 3, 3, 3), seed=0).data
        assert np.all(np.abs(w) <= np.sqrt(6.0 / (27 * 3 + 27 * 4)))

    def test_same_seed(self):
        assert init_params((4, 6), seed=3).data.tobytes() == init_params((4, 6), seed=3).data.tobytes()

    def test_different_seeds_differ(self):
        a, b = init_params((50, 40), seed=1).data, init_params((50, 40), seed=2).data
        assert np.mean(a != b) >= 0.99

    def test_positive_dims_required(self):
        with pytest.raises(DimensionError):
            init_params((3, 0), seed=0)

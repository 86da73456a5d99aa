"""Soft attention, pyramid readout and energy distribution."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from helpers import assert_gradients, param, reduce

from jointattn import tensor as tn
from jointattn.attention import (
    AttentionParams,
    PyramidLayout,
    attend,
    compute_attention,
    energy_distribution,
    pyramid_readout,
    renormalize,
)
from jointattn.errors import ConfigError, DimensionError
from jointattn.tensor import Tensor

seeds = st.integers(0, 2**32 - 1)


def attend_oracle(cube, att):
    out = np.zeros(cube.shape[1])
    for i in range(cube.shape[0]):
        out += att[i] * cube[i]
    return out


def energy_oracle(cube, eps=1e-8):
    k2, n = cube.shape
    per_loc = np.zeros(k2)
    for i in range(k2):
        for c in range(n):
            per_loc[i] += cube[i, c]
    total = 0.0
    for i in range(k2):
        total += per_loc[i]
    return per_loc / (total + eps)


class TestComputeAttention:
    def test_zero_hidden_is_uniform(self):
        p = AttentionParams(16, 5, seed=0)
        np.testing.assert_allclose(compute_attention(Tensor(np.zeros(5)), p).data, np.full(16, 1 / 16), atol=1e-15)

    def test_identical_rows_uniform(self, rng):
        p = AttentionParams(9, 4, seed=0)
        p.w_att.data = np.tile(rng.normal(size=4), (9, 1))
        np.testing.assert_allclose(compute_attention(Tensor(rng.normal(size=4)), p).data, np.full(9, 1 / 9), atol=1e-15)

    def test_direct_softmax_oracle(self, rng):
        p = AttentionParams(16, 6, seed=1)
        h = rng.normal(size=6)
        logits = p.w_att.data @ h
        expected = np.exp(logits) / np.exp(logits).sum()
        att = compute_attention(Tensor(h), p).data
        np.testing.assert_allclose(att, expected, rtol=0, atol=1e-15)
        assert abs(att.sum() - 1) <= 1e-12

    @given(seeds, st.floats(0.1, 20.0))
    def test_simplex_for_any_hidden(self, seed, spread):
        r = np.random.default_rng(seed)
        p = AttentionParams(16, 8, seed=seed % 1000)
        att = compute_attention(Tensor(r.normal(0, spread, (3, 8))), p).data
        assert np.all(att > 0)
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-9)

    def test_gradients(self, rng):
        p = AttentionParams(16, 6, seed=2)
        h = param(rng.uniform(-2, 2, (2, 6)))
        assert_gradients(lambda: reduce(compute_attention(h, p), np.random.default_rng(1)), {"h": h, "w": p.w_att})


class TestAttend:
    def test_delta_attention(self, rng):
        cube = rng.normal(size=(16, 5))
        att = np.zeros(16)
        att[7] = 1.0
        np.testing.assert_array_equal(attend(Tensor(cube), Tensor(att)).data, cube[7])

    def test_uniform_on_constant(self):
        out = attend(Tensor(np.full((16, 4), 2.5)), Tensor(np.full(16, 1 / 16))).data
        np.testing.assert_allclose(out, np.full(4, 2.5), atol=1e-14)

    def test_loop_oracle(self, rng):
        cube, att = rng.normal(size=(16, 5)), rng.dirichlet(np.ones(16))
        np.testing.assert_allclose(attend(Tensor(cube), Tensor(att)).data, attend_oracle(cube, att), rtol=0, atol=1e-12)

    def test_batched_matches_loop(self, rng):
        cube, att = rng.normal(size=(3, 2, 16, 5)), rng.dirichlet(np.ones(16), size=(3, 2))
        out = attend(Tensor(cube), Tensor(att)).data
        for a in range(3):
            for b in range(2):
                np.testing.assert_allclose(out[a, b], attend_oracle(cube[a, b], att[a, b]), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            attend(Tensor(np.zeros((16, 3))), Tensor(np.full(9, 1 / 9)))

    @given(seeds)
    def test_convexity(self, seed):
        r = np.random.default_rng(seed)
        cube = r.normal(size=(16, 6))
        att = r.dirichlet(np.full(16, 0.3))
        out = attend(Tensor(cube), Tensor(att)).data
        assert np.all(out >= cube.min(axis=0) - 1e-12)
        assert np.all(out <= cube.max(axis=0) + 1e-12)

    def test_gradients(self, rng):
        cube = param(rng.uniform(-2, 2, (2, 16, 3)))
        logits = param(rng.uniform(-2, 2, (2, 16)))
        assert_gradients(lambda: reduce(attend(cube, tn.softmax(logits)), np.random.default_rng(2)),
                         {"cube": cube, "logits": logits})


class TestPyramid:
    @given(st.sampled_from([2, 4, 6, 8, 10, 12]))
    def test_quadrants_partition_grid(self, k):
        layout = PyramidLayout(k)
        cells = np.concatenate(layout.quadrants)
        assert len(cells) == k * k
        assert sorted(cells.tolist()) == list(range(k * k))
        assert all(len(q) == k * k // 4 for q in layout.quadrants)

    @pytest.mark.parametrize("k", [3, 7, 1])
    def test_odd_grid(self, k):
        with pytest.raises(ConfigError):
            PyramidLayout(k)

    def test_uniform_constant_cube_blocks_equal(self):
        out = pyramid_readout(Tensor(np.full((16, 3), 0.7)), Tensor(np.full(16, 1 / 16)), PyramidLayout(4)).data
        np.testing.assert_allclose(out, np.full(15, 0.7), atol=1e-14)

    def test_mass_in_quadrant_one_equals_full(self, rng):
        layout = PyramidLayout(4)
        cube = rng.normal(size=(16, 3))
        att = np.zeros(16)
        att[layout.quadrants[0]] = rng.dirichlet(np.ones(4))
        out = pyramid_readout(Tensor(cube), Tensor(att), layout).data
        np.testing.assert_allclose(out[3:6], out[:3], atol=1e-9)

    def test_first_block_is_attend(self, rng):
        layout = PyramidLayout(8)
        cube, att = rng.normal(size=(64, 5)), rng.dirichlet(np.ones(64))
        out = pyramid_readout(Tensor(cube), Tensor(att), layout).data
        np.testing.assert_allclose(out[:5], attend(Tensor(cube), Tensor(att)).data, rtol=0, atol=1e-12)

    def test_quadrant_blocks_match_loop(self, rng):
        layout = PyramidLayout(4)
        cube, att = rng.normal(size=(16, 2)), rng.dirichlet(np.ones(16))
        out = pyramid_readout(Tensor(cube), Tensor(att), layout).data
        for r, q in enumerate(layout.quadrants):
            w = att[q] / att[q].sum()
            np.testing.assert_allclose(out[2 * (r + 1):2 * (r + 2)], attend_oracle(cube[q], w), atol=1e-12)

    def test_empty_quadrant_falls_back_to_uniform(self, rng):
        layout = PyramidLayout(4)
        cube = rng.normal(size=(16, 2))
        att = np.zeros(16)
        att[layout.quadrants[0]] = 0.25
        out = pyramid_readout(Tensor(cube), Tensor(att), layout).data
        q = layout.quadrants[3]
        np.testing.assert_allclose(out[8:10], cube[q].mean(axis=0), atol=1e-12)
        assert np.all(np.isfinite(out))

    def test_gradients(self, rng):
        layout = PyramidLayout(4)
        cube = param(rng.uniform(-2, 2, (2, 16, 3)))
        logits = param(rng.uniform(-2, 2, (2, 16)))
        assert_gradients(lambda: reduce(pyramid_readout(cube, tn.softmax(logits), layout), np.random.default_rng(3)),
                         {"cube": cube, "logits": logits})

    def test_renormalize_gradients(self, rng):
        x = param(rng.uniform(0.1, 2, (3, 4)))
        assert_gradients(lambda: reduce(renormalize(x), np.random.default_rng(4)), {"x": x})


class TestEnergy:
    def test_constant_cube_uniform(self):
        np.testing.assert_allclose(energy_distribution(Tensor(np.full((16, 4), 3.0))).data, np.full(16, 1 / 16), atol=1e-12)

    def test_zero_cube_gives_zeros(self):
        out = energy_distribution(Tensor(np.zeros((16, 4)))).data
        np.testing.assert_array_equal(out, np.zeros(16))

    def test_loop_oracle(self, rng):
        cube = rng.uniform(0, 2, (16, 5))
        np.testing.assert_allclose(energy_distribution(Tensor(cube)).data, energy_oracle(cube), rtol=0, atol=1e-10)

    @given(seeds, st.floats(0.01, 100.0))
    def test_scale_invariance(self, seed, alpha):
        cube = np.random.default_rng(seed).uniform(0, 1, (16, 4))
        # eps leaves a gap of p * eps * |1/T1 - 1/T2|; totals >= 10 keep it under 1e-9
        cube *= 10.0 * max(1.0, 1.0 / alpha) / cube.sum()
        a = energy_distribution(Tensor(cube)).data
        b = energy_distribution(Tensor(alpha * cube)).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)

    @given(seeds)
    def test_on_simplex_for_large_totals(self, seed):
        e = energy_distribution(Tensor(np.random.default_rng(seed).uniform(0, 1, (2, 16, 4)))).data
        assert np.all(e >= 0)
        np.testing.assert_allclose(e.sum(axis=-1), 1.0, atol=1e-6)

    def test_gradients(self, rng):
        cube = param(rng.uniform(0, 2, (2, 16, 3)))
        assert_gradients(lambda: reduce(energy_distribution(cube), np.random.default_rng(5)), {"cube": cube})

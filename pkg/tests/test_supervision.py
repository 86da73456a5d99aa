"""Loss heads, attention regularizer, loss composition and the clip vote."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from helpers import assert_gradients, param, reduce

from jointattn import tensor as tn
from jointattn.attention import AttentionParams, compute_attention
from jointattn.errors import ContractError, DimensionError
from jointattn.supervision import (
    LOG_EPS,
    attention_regularizer,
    class_probs,
    clip_vote,
    cross_entropy,
    majority_label,
    total_loss,
    weight_decay,
)
from jointattn.tensor import Tensor

seeds = st.integers(0, 2**32 - 1)


def regularizer_oracle(cube, att, eps=1e-8):
    k2, n = cube.shape
    total = 0.0
    for i in range(k2):
        for c in range(n):
            total += cube[i, c]
    out = 0.0
    for i in range(k2):
        loc = 0.0
        for c in range(n):
            loc += cube[i, c]
        out += (loc / (total + eps) - att[i]) ** 2
    return out


def vote_oracle(probs, l1, l2):
    """Count votes by brute force; ties by window mean probability, then index."""
    C = probs.shape[1]
    counts = [0] * C
    sums = [0.0] * C
    for t in range(l1 - l2, l1):
        row = probs[t]
        best = 0
        for c in range(1, C):
            if row[c] > row[best]:
                best = c
        counts[best] += 1
        for c in range(C):
            sums[c] += row[c]
    best = 0
    for c in range(1, C):
        if counts[c] > counts[best] or (counts[c] == counts[best] and sums[c] / l2 > sums[best] / l2):
            best = c
    return best


class TestClassProbs:
    def test_zero_weights_uniform(self, rng):
        p = class_probs(Tensor(rng.normal(size=5)), Tensor(np.zeros((4, 5)))).data
        np.testing.assert_allclose(p, np.full(4, 0.25), atol=1e-15)

    def test_two_class_example(self):
        p = class_probs(Tensor([1.0]), Tensor([[math.log(3.0)], [0.0]])).data
        np.testing.assert_allclose(p, [0.75, 0.25], atol=1e-6)

    def test_simplex(self, rng):
        p = class_probs(Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(5, 6)))).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


class TestCrossEntropy:
    def test_one_hot(self):
        assert cross_entropy(Tensor([0.0, 1.0, 0.0]), 1).item() <= 1e-11

    def test_uniform_four(self):
        assert cross_entropy(Tensor(np.full(4, 0.25)), 3).item() == pytest.approx(math.log(4), abs=1e-6)

    def test_direct_oracle(self, rng):
        p = rng.dirichlet(np.ones(5), size=6)
        labels = rng.integers(0, 5, 6)
        expected = -np.log(p[np.arange(6), labels] + LOG_EPS)
        np.testing.assert_allclose(cross_entropy(Tensor(p), labels).data, expected, rtol=0, atol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.full(4, 0.25)), 4)

    @given(seeds, st.floats(0.01, 50.0))
    def test_bounds(self, seed, spread):
        r = np.random.default_rng(seed)
        p = tn.softmax(Tensor(r.normal(0, spread, 6))).data
        ce = cross_entropy(Tensor(p), int(r.integers(0, 6))).item()
        assert 0 <= ce <= -math.log(LOG_EPS)


class TestRegularizer:
    def test_zero_when_energy_matches(self, rng):
        cube = rng.uniform(0.1, 1, (16, 3))
        att = cube.sum(axis=1) / (cube.sum() + 1e-8)
        assert attention_regularizer(Tensor(cube), Tensor(att)).item() == pytest.approx(0.0, abs=1e-24)

    def test_zero_cube_uniform_attention(self):
        assert attention_regularizer(Tensor(np.zeros((4, 2))), Tensor(np.full(4, 0.25))).item() == 0.25

    def test_loop_oracle(self, rng):
        cube, att = rng.uniform(0, 2, (16, 5)), rng.dirichlet(np.ones(16))
        value = attention_regularizer(Tensor(cube), Tensor(att)).item()
        assert abs(value - regularizer_oracle(cube, att)) <= 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            attention_regularizer(Tensor(np.zeros((16, 3))), Tensor(np.zeros(9)))

    @given(seeds)
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        value = attention_regularizer(Tensor(r.uniform(0, 1, (3, 16, 4))), Tensor(r.dirichlet(np.ones(16), 3)))
        assert np.all(value.data >= 0)

    def test_attention_is_detached(self, rng):
        att_p = AttentionParams(16, 4, seed=0)
        att_p.w_att.data = rng.normal(size=(16, 4))
        h = Tensor(rng.normal(size=4))
        cube = param(rng.uniform(0, 1, (16, 3)))

        def value():
            return attention_regularizer(cube, compute_attention(h, att_p))

        before = value().item()
        tn.backward(value())
        assert att_p.w_att.grad is None or not np.any(att_p.w_att.grad)
        assert np.any(cube.grad)
        att_p.w_att.data[3] += 0.5
        assert value().item() != before

    def test_cube_gradients(self, rng):
        cube = param(rng.uniform(0.1, 1, (2, 16, 3)))
        att = Tensor(rng.dirichlet(np.ones(16), 2))
        assert_gradients(lambda: tn.sum_axis(attention_regularizer(cube, att)), {"cube": cube})


class TestWeightDecay:
    def test_examples(self):
        assert weight_decay([Tensor(np.zeros((2, 3)))]).item() == 0.0
        assert weight_decay([Tensor([3.0, 4.0])]).item() == 25.0
        assert weight_decay([]).item() == 0.0

    def test_loop_oracle(self, rng):
        params = [Tensor(rng.normal(size=s)) for s in [(3, 4), (5,), (2, 2, 2)]]
        expected = 0.0
        for p in params:
            for v in p.data.reshape(-1):
                expected += v * v
        assert abs(weight_decay(params).item() - expected) <= 1e-10


def _loss_inputs(r, batch=2, T=4, C=3, k2=16, n=3):
    lstm = Tensor(r.dirichlet(np.ones(C), (batch, T)))
    head = Tensor(r.dirichlet(np.ones(C), (batch, T)))
    att = Tensor(r.dirichlet(np.ones(k2), (batch, T)))
    cubes = Tensor(r.uniform(0, 1, (batch, T, k2, n)))
    params = [Tensor(r.normal(size=(3, 2))), Tensor(r.normal(size=4))]
    labels = r.integers(0, C, batch)
    return lstm, labels, head, att, cubes, params


class TestTotalLoss:
    @given(seeds, st.sampled_from([0.0, 0.5, 1000.0]), st.sampled_from([0.0, 0.5, 1000.0]))
    def test_decomposition(self, seed, lam, zeta):
        r = np.random.default_rng(seed)
        lstm, labels, head, att, cubes, params = _loss_inputs(r)
        loss = total_loss(lstm, labels, head, att, cubes, params, lam, zeta)
        # independent recomposition
        idx = np.arange(lstm.shape[0])[:, None], np.arange(lstm.shape[1])[None, :], labels[:, None]
        ce_lstm = np.mean(np.sum(-np.log(lstm.data[idx] + LOG_EPS), axis=1))
        ce_3d = np.mean(np.sum(-np.log(head.data[idx] + LOG_EPS), axis=1))
        energy = cubes.data.sum(axis=-1) / (cubes.data.sum(axis=(-1, -2))[..., None] + 1e-8)
        reg = np.mean(np.sum((energy - att.data) ** 2, axis=(1, 2)))
        wd = sum(float(np.sum(p.data ** 2)) for p in params)
        for name, value in [("ce_lstm", ce_lstm), ("ce_3d", ce_3d), ("att_reg", reg), ("wd", wd)]:
            assert abs(getattr(loss, name).item() - value) <= 1e-12 * max(1.0, abs(value))
        parts = loss.ce_lstm.item() + loss.ce_3d.item() + lam * loss.att_reg.item() + zeta * loss.wd.item()
        assert abs(loss.total.item() - parts) <= 1e-12 * max(1.0, abs(parts))
        assert all(v >= 0 for v in loss.components().values())

    def test_lambda_zero_removes_regularizer(self, rng):
        lstm, labels, head, att, cubes, params = _loss_inputs(rng)
        loss = total_loss(lstm, labels, head, att, cubes, params, 0.0, 1e-5)
        assert loss.total.item() == loss.ce_lstm.item() + loss.ce_3d.item() + 1e-5 * loss.wd.item()

    def test_zero_params_zero_decay(self, rng):
        lstm, labels, head, att, cubes, _ = _loss_inputs(rng)
        loss = total_loss(lstm, labels, head, att, cubes, [Tensor(np.zeros(3))], 1000.0, 0.0)
        assert loss.wd.item() == 0.0

    def test_missing_heads_contribute_zero(self, rng):
        lstm, labels, *_ = _loss_inputs(rng)
        loss = total_loss(lstm, labels, None, None, None, [], 1000.0, 1e-5)
        assert loss.total.item() == loss.ce_lstm.item()

    def test_mismatched_timesteps(self, rng):
        lstm, labels, head, att, cubes, params = _loss_inputs(rng)
        with pytest.raises(DimensionError):
            total_loss(lstm, labels, Tensor(head.data[:, :3]), att, cubes, params, 1.0, 1.0)
        with pytest.raises(DimensionError):
            total_loss(lstm, labels[:1], head, att, cubes, params, 1.0, 1.0)

    def test_gradients(self, rng):
        logits = param(rng.normal(size=(2, 3, 4)))
        head_logits = param(rng.normal(size=(2, 3, 4)))
        cubes = param(rng.uniform(0.1, 1, (2, 3, 16, 2)))
        att = Tensor(rng.dirichlet(np.ones(16), (2, 3)))
        w = param(rng.normal(size=3))

        def loss():
            return total_loss(tn.softmax(logits, axis=-1), [1, 3], tn.softmax(head_logits, axis=-1), att, cubes,
                              [w], 1000.0, 0.5).total

        assert_gradients(loss, {"logits": logits, "head": head_logits, "cubes": cubes, "w": w})


class TestClipVote:
    def test_unanimous(self):
        probs = np.tile([0.1, 0.2, 0.6, 0.1], (5, 1))
        assert clip_vote(probs, 5, 3).label == 2

    def test_two_against_one(self):
        probs = np.array([[0.2, 0.8], [0.3, 0.7], [0.9, 0.1]])
        assert clip_vote(probs, 3, 3).label == 1

    def test_tie_by_mean_probability(self):
        probs = np.array([[0.9, 0.1, 0.0], [0.45, 0.55, 0.0]])
        assert clip_vote(probs, 2, 2).label == 0

    def test_tie_by_lowest_index(self):
        probs = np.array([[0.6, 0.4], [0.4, 0.6]])
        assert clip_vote(probs, 2, 2).label == 0

    def test_window_longer_than_clip(self):
        with pytest.raises(ContractError):
            clip_vote(np.full((5, 2), 0.5), 3, 4)

    def test_clip_longer_than_sequence(self):
        with pytest.raises(ContractError):
            clip_vote(np.full((3, 2), 0.5), 4, 2)

    def test_vote_count_oracle(self):
        r = np.random.default_rng(2024)
        for _ in range(200):
            C, T = int(r.integers(2, 6)), int(r.integers(1, 12))
            l1 = int(r.integers(1, T + 1))
            l2 = int(r.integers(1, l1 + 1))
            probs = r.dirichlet(np.full(C, 0.5), T)
            assert clip_vote(probs, l1, l2).label == vote_oracle(probs, l1, l2)

    @given(seeds)
    def test_invariant_to_frames_before_window(self, seed):
        r = np.random.default_rng(seed)
        probs = r.dirichlet(np.ones(4), 12)
        l1, l2 = 10, 4
        shuffled = probs.copy()
        shuffled[:l1 - l2] = probs[r.permutation(l1 - l2)]
        assert clip_vote(probs, l1, l2).label == clip_vote(shuffled, l1, l2).label

    def test_window_on_simplex(self, rng):
        vote = clip_vote(rng.dirichlet(np.ones(3), 8), 8, 5)
        np.testing.assert_allclose(vote.probs.sum(axis=1), 1.0, atol=1e-12)
        assert vote.frame_labels.shape == (5,)


class TestMajorityLabel:
    def test_majority(self):
        assert majority_label([2, 1, 2]) == 2

    def test_tie_uses_probabilities(self):
        assert majority_label([0, 1], np.array([0.2, 0.7, 0.1])) == 1

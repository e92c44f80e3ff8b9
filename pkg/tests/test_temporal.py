from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xgpa import tensor as T
from xgpa.errors import ConfigError
from xgpa.gradcheck import check_gradients
from xgpa.nn import AttentionVariant
from xgpa.spectral import naive_autocorrelation
from xgpa.temporal import (
    AutocorrAttentionLayer,
    PatchAttentionLayer,
    autocorr_forward,
    pad_to_multiple,
    patch_forward,
    pooled_correlation,
    pyramid_forward,
    topk_delays,
)
from xgpa.tensor import Tensor

VARIANTS = list(AttentionVariant)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def straight_line_patch(layer: PatchAttentionLayer, x: np.ndarray):
    """Direct loop over patches and queries; x: [N, L, D] with L divisible by ps."""

    def lin(m, v):
        return v @ m.weight.data + m.bias.data

    fq = lambda v: lin(layer.mappings.query, v)
    fk = lambda v: lin(layer.mappings.key or layer.mappings.query, v)
    fv = (lambda v: v) if layer.mappings.value is None else (lambda v: lin(layer.mappings.value, v))
    ps = layer.ps
    w_patch = np.concatenate([layer.w_query.data[:, 0]] + [layer.w_keys.data[:, s] for s in range(ps - 1)])
    n, length, d = x.shape
    out = np.zeros((n, length // ps, d))
    scores = np.zeros((n, length // ps, ps))
    for node in range(n):
        for j in range(length // ps):
            members = x[node, j * ps : (j + 1) * ps]
            logits = []
            for q in range(ps):
                keys = [fk(members[i]) for i in range(ps) if i != q]
                logits.append(sigmoid(w_patch @ np.concatenate([fq(members[q])] + keys)))
            s = np.exp(logits) / np.sum(np.exp(logits))
            scores[node, j] = s
            out[node, j] = sum(s[q] * fv(members[q]) for q in range(ps))
    return out, scores


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("ps", [2, 3, 4])
def test_patch_layer_matches_straight_line_formulas(variant, ps):
    rng = np.random.default_rng(ps)
    layer = PatchAttentionLayer(rng, 3, ps, variant, score_activation="sigmoid")
    for m in (layer.mappings.query, layer.mappings.key, layer.mappings.value):
        if m is not None:
            m.bias.data[:] = rng.normal(size=3) * 0.1
    x = rng.normal(size=(2, 4 * ps, 3))
    y, s = layer(T.expand_dims(Tensor(x), 0))
    ref_y, ref_s = straight_line_patch(layer, x)
    np.testing.assert_allclose(y.data[0], ref_y, atol=1e-12)
    np.testing.assert_allclose(s.data[0], ref_s, atol=1e-12)


def test_hand_set_ps2_gives_score_weighted_average_of_raw_inputs():
    layer = PatchAttentionLayer(np.random.default_rng(0), 1, 2, AttentionVariant.IDENTITY_VALUE, score_activation="sigmoid")
    layer.mappings.query.weight.data[:] = 1.0
    layer.mappings.key.weight.data[:] = 1.0
    layer.w_query.data[:] = 2.0
    layer.w_keys.data[:] = -1.0
    x = np.array([[[1.0], [3.0], [-2.0], [0.5]]])
    y = patch_forward(layer, x).data
    for j, (a, b) in enumerate([(1.0, 3.0), (-2.0, 0.5)]):
        la, lb = sigmoid(2 * a - b), sigmoid(2 * b - a)
        sa = np.exp(la) / (np.exp(la) + np.exp(lb))
        assert y[0, j, 0] == pytest.approx(sa * a + (1 - sa) * b, abs=1e-14)


@pytest.mark.parametrize("variant", VARIANTS)
def test_identical_members_give_uniform_scores(variant):
    rng = np.random.default_rng(1)
    layer = PatchAttentionLayer(rng, 2, 3, variant)
    frame = rng.normal(size=2)
    x = np.tile(frame, (1, 1, 6, 1))
    y, s = layer(Tensor(x))
    np.testing.assert_allclose(s.data, 1 / 3, atol=1e-15)
    np.testing.assert_allclose(y.data[0, 0, 0], layer.mappings.v(Tensor(frame)).data, atol=1e-14)


def test_single_patch_when_ps_equals_length():
    layer = PatchAttentionLayer(np.random.default_rng(2), 2, 5)
    assert patch_forward(layer, np.ones((3, 5, 2))).shape == (3, 1, 2)


def test_patch_size_one_rejected():
    with pytest.raises(ConfigError):
        PatchAttentionLayer(np.random.default_rng(0), 2, 1)


def test_padding_repeats_final_frame():
    x = Tensor(np.arange(7.0).reshape(1, 1, 7, 1))
    padded = pad_to_multiple(x, 4)
    assert padded.data[0, 0, :, 0].tolist() == [0, 1, 2, 3, 4, 5, 6, 6]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.lists(st.integers(2, 4), min_size=0, max_size=3), st.integers(0, 1000))
def test_compression_arithmetic_and_patch_normalization(length, sizes, seed):
    rng = np.random.default_rng(seed)
    levels = [PatchAttentionLayer(rng, 2, ps) for ps in sizes]
    x = rng.normal(size=(2, length, 2))
    expected = [length]
    for ps in sizes:
        expected.append(-(-expected[-1] // ps))
    if expected[-1] < 2:
        return
    out = pyramid_forward(levels, AutocorrAttentionLayer(rng, 2, 1), x)
    assert out.lengths() == expected
    for s in out.patch_scores:
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)
    for s in out.scores:
        np.testing.assert_allclose(s.sum(), 1.0, atol=1e-9)


def test_pyramid_examples():
    rng = np.random.default_rng(3)
    head = AutocorrAttentionLayer(rng, 2, 1)
    x = rng.normal(size=(3, 8, 2))
    bare = pyramid_forward([], head, x)
    assert len(bare.levels) == 1 and len(bare.outputs) == 1
    direct, delays, scores = autocorr_forward(head, x)
    np.testing.assert_array_equal(bare.outputs[0].data, direct.data)
    np.testing.assert_array_equal(bare.delays[0], delays)
    two = pyramid_forward([PatchAttentionLayer(rng, 2, 2), PatchAttentionLayer(rng, 2, 2)], head, x)
    assert two.lengths() == [8, 4, 2]
    with pytest.raises(ConfigError):
        pyramid_forward([PatchAttentionLayer(rng, 2, 2)], [head], x)


def periodic_input(rng, period, cycles, nodes=3, dim=2):
    pattern = rng.normal(size=(nodes, period, dim))
    pattern -= pattern.mean(axis=1, keepdims=True)
    return np.tile(pattern, (1, cycles, 1))


@pytest.mark.parametrize("period", [3, 5, 7, 12])
def test_periodic_input_selects_its_period(period):
    rng = np.random.default_rng(period)
    layer = AutocorrAttentionLayer(rng, 2, 1, AttentionVariant.SHARED_QK_IDENTITY_VALUE)
    x = periodic_input(rng, period, 8)
    out, delays, scores = autocorr_forward(layer, x)
    assert delays.tolist() == [period]
    assert scores.tolist() == [1.0]
    np.testing.assert_allclose(out.data, np.roll(x, -period, axis=1), atol=1e-14)
    # cross-check the selection against the direct-sum oracle
    q = layer.mappings.q(Tensor(x)).data
    naive = naive_autocorrelation(np.swapaxes(q, 1, 2), np.swapaxes(q, 1, 2)).mean(axis=(0, 1))
    assert int(np.argmax(naive[1:])) + 1 == period


@pytest.mark.parametrize("variant", VARIANTS)
def test_single_delay_scores_are_one(variant):
    rng = np.random.default_rng(4)
    _, _, scores = autocorr_forward(AutocorrAttentionLayer(rng, 2, 1, variant), rng.normal(size=(2, 9, 2)))
    assert scores.tolist() == [1.0]


def test_equal_correlations_average_the_rolled_copies():
    rng = np.random.default_rng(5)
    layer = AutocorrAttentionLayer(rng, 2, 2, AttentionVariant.IDENTITY_VALUE)
    layer.mappings.query.weight.data[:] = 0.0  # every R(tau) is exactly zero
    x = rng.normal(size=(2, 6, 2))
    out, delays, scores = autocorr_forward(layer, x)
    assert delays.tolist() == [1, 2]
    assert scores.tolist() == [0.5, 0.5]
    expected = 0.5 * (np.roll(x, -1, axis=1) + np.roll(x, -2, axis=1))
    np.testing.assert_allclose(out.data, expected, atol=1e-15)


@pytest.mark.parametrize("variant", [AttentionVariant.IDENTITY_VALUE, AttentionVariant.SHARED_QK_IDENTITY_VALUE])
def test_identity_value_output_is_linear_combination_of_input(variant):
    rng = np.random.default_rng(6)
    layer = AutocorrAttentionLayer(rng, 3, 3, variant)
    x = rng.normal(size=(4, 11, 3))
    out, delays, scores = autocorr_forward(layer, x)
    length = x.shape[1]
    for p in range(length):
        direct = sum(s * x[:, (p + tau) % length] for s, tau in zip(scores, delays))
        np.testing.assert_allclose(out.data[:, p], direct, atol=1e-9)


def test_topk_ties_go_to_smaller_delay():
    assert topk_delays(np.array([9.0, 1.0, 3.0, 3.0, 1.0]), 2).tolist() == [2, 3]
    assert topk_delays(np.array([0.0, 1.0, 1.0, 1.0]), 3).tolist() == [1, 2, 3]
    with pytest.raises(ConfigError):
        topk_delays(np.zeros(4), 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 30), st.integers(0, 10_000))
def test_topk_deterministic(length, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 3, size=length).astype(float)
    k = int(rng.integers(1, length))
    first = topk_delays(scores, k)
    assert np.array_equal(first, topk_delays(scores.copy(), k))
    assert np.all(first >= 1) and len(set(first.tolist())) == k
    vals = scores[first]
    assert np.all(np.diff(vals) <= 0)


def test_k_larger_than_length_rejected():
    layer = AutocorrAttentionLayer(np.random.default_rng(0), 1, 4)
    with pytest.raises(ConfigError):
        autocorr_forward(layer, np.ones((1, 4, 1)))


@pytest.mark.parametrize("variant", VARIANTS)
def test_selection_scores_equal_pooled_correlation(variant):
    rng = np.random.default_rng(7)
    layer = AutocorrAttentionLayer(rng, 3, 2, variant)
    for m in (layer.mappings.query, layer.mappings.key):
        if m is not None:
            m.bias.data[:] = rng.normal(size=3)
    x = rng.normal(size=(2, 4, 13, 3))
    q = layer.mappings.q(Tensor(x)).data
    k = layer.mappings.k(Tensor(x)).data
    np.testing.assert_allclose(layer.selection_scores(x), pooled_correlation(q, k), atol=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
def test_delay_scores_match_pooled_correlation_at_chosen_delays(variant):
    rng = np.random.default_rng(8)
    layer = AutocorrAttentionLayer(rng, 2, 3, variant)
    x = Tensor(rng.normal(size=(2, 3, 10, 2)))
    q, k = layer.mappings.q(x), layer.mappings.k(x)
    delays = np.array([[1, 4, 9], [2, 3, 5]])
    pooled = pooled_correlation(q.data, k.data)
    np.testing.assert_allclose(layer.delay_scores(q, k, delays).data, np.take_along_axis(pooled, delays, axis=1), atol=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", range(3))
def test_patch_layer_gradients(variant, seed):
    rng = np.random.default_rng(seed)
    layer = PatchAttentionLayer(rng, 3, 3, variant)
    x = Tensor(rng.normal(size=(1, 2, 7, 3)), requires_grad=True)
    w = rng.normal(size=(1, 2, 3, 3))
    errors = check_gradients(lambda: T.reduce_sum(layer(x)[0] * Tensor(w)), layer.parameters() + [x])
    assert max(errors) < 1e-4, errors


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", range(3))
def test_autocorr_layer_gradients(variant, seed):
    rng = np.random.default_rng(seed)
    layer = AutocorrAttentionLayer(rng, 3, 2, variant)
    x = Tensor(rng.normal(size=(2, 2, 9, 3)), requires_grad=True)
    w = rng.normal(size=(2, 2, 9, 3))
    errors = check_gradients(lambda: T.reduce_sum(layer(x)[0] * Tensor(w)), layer.parameters() + [x])
    assert max(errors) < 1e-4, errors

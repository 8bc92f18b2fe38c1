"""Tensor primitives: frozen-value examples, algebraic properties, gradient checks."""

import math

import numpy as np
import pytest

from signlookup.errors import ConfigError, NumericError, ShapeError
from signlookup.numerics import (
    AttentionParams,
    FeedForwardParams,
    RngState,
    Tensor,
    dropout,
    feed_forward,
    grad_check,
    grad_check_report,
    layer_norm,
    leaky_relu,
    linear,
    multi_head_attention,
    no_grad,
    parameter,
    scaled_dot_attention,
    softmax,
    tensor,
    tsum,
    watch_activation_kinks,
    xavier_init,
)

GRAD_TOL = 1e-4


def rand(shape, seed, scale=1.0):
    return (scale * RngState(seed, 0).generator().standard_normal(shape)).astype(np.float32)


# softmax ---------------------------------------------------------------


def test_softmax_symmetry():
    assert np.allclose(softmax(np.array([0.0, 0.0], np.float32)).data, [0.5, 0.5])


def test_softmax_stability_under_constant_shift():
    out = softmax(np.array([1000.0, 1000.0], np.float32))
    assert np.allclose(out.data, [0.5, 0.5])
    a = softmax(np.array([1.0, 2.0, 3.0], np.float32)).data
    b = softmax(np.array([1.0, 2.0, 3.0], np.float32) + 500.0).data
    assert np.allclose(a, b, atol=1e-6)


def test_softmax_direct_evaluation():
    # oracle: e^x / sum e^x with x = [ln 1, ln 3]
    out = softmax(np.array([math.log(1.0), math.log(3.0)], np.float32))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_softmax_rows_sum_to_one(seed):
    gen = RngState(seed, 0).generator()
    x = gen.normal(0, 3, size=(gen.integers(1, 7), gen.integers(1, 9))).astype(np.float32)
    out = softmax(x).data
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert (out >= 0).all()


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        softmax(np.array([1.0, np.inf], np.float32))


# scaled dot attention --------------------------------------------------


def test_attention_single_key_returns_value_row():
    q = np.array([[3.0, -2.0]], np.float32)
    k = np.array([[0.5, 0.5]], np.float32)
    v = np.array([[7.0, 1.0, -4.0]], np.float32)
    out = scaled_dot_attention(q, k, v)
    assert np.allclose(out.data, v)


def test_attention_identical_keys_average_values():
    q = np.array([[1.0, 2.0]], np.float32)
    k = np.array([[0.3, -0.7], [0.3, -0.7]], np.float32)
    v = np.array([[2.0, 0.0], [0.0, 4.0]], np.float32)
    out = scaled_dot_attention(q, k, v)
    assert np.allclose(out.data, [[1.0, 2.0]], atol=1e-6)


def test_attention_hand_evaluated_mixture():
    # oracle: scores [1/sqrt(2), 0] -> weights [0.6697615493, 0.3302384507]
    q = np.array([[1.0, 0.0]], np.float32)
    kv = np.eye(2, dtype=np.float32)
    out = scaled_dot_attention(q, kv, kv)
    assert np.allclose(out.data, [[0.6697615493, 0.3302384507]], atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_attention_output_in_convex_hull_of_values(seed):
    gen = RngState(seed, 1).generator()
    n_q, n_k, d_k, d_v = 5, 7, 4, 3
    q = gen.normal(0, 2, (n_q, d_k)).astype(np.float32)
    k = gen.normal(0, 2, (n_k, d_k)).astype(np.float32)
    v = gen.normal(0, 2, (n_k, d_v)).astype(np.float32)
    out = scaled_dot_attention(q, k, v).data
    eps = 1e-5
    assert (out >= v.min(axis=0) - eps).all()
    assert (out <= v.max(axis=0) + eps).all()


def test_attention_shape_mismatch():
    with pytest.raises(ShapeError):
        scaled_dot_attention(rand((2, 3), 0), rand((4, 2), 1), rand((4, 3), 2))
    with pytest.raises(ShapeError):
        scaled_dot_attention(rand((2, 3), 0), rand((4, 3), 1), rand((5, 3), 2))


# multi-head attention --------------------------------------------------


def _identity_attention_params(d):
    eye = np.eye(d, dtype=np.float32)
    zero = np.zeros(d, dtype=np.float32)
    return AttentionParams(*(parameter(x) for x in (eye, zero, eye, zero, eye, zero, eye, zero)))


def test_single_head_identity_projections_match_scaled_dot():
    x_q, x_kv = rand((3, 4), 10), rand((5, 4), 11)
    out = multi_head_attention(x_q, x_kv, _identity_attention_params(4), n_heads=1)
    ref = scaled_dot_attention(x_q, x_kv, x_kv)
    assert np.allclose(out.data, ref.data, atol=1e-6)


def test_multi_head_single_key_is_projected_value():
    d = 4
    params = _identity_attention_params(d)
    x_kv = rand((1, d), 12)
    out = multi_head_attention(rand((3, d), 13), x_kv, params, n_heads=2)
    assert np.allclose(out.data, np.repeat(x_kv, 3, axis=0), atol=1e-6)


def test_multi_head_matches_per_head_composition():
    # oracle: slice fused projections into heads, run scaled_dot_attention per
    # head, concatenate, project
    d, n_heads = 8, 4
    d_h = d // n_heads
    gen = RngState(42, 0).generator()
    x_q = gen.normal(0, 1, (4, d)).astype(np.float32)
    x_kv = gen.normal(0, 1, (6, d)).astype(np.float32)
    mats = [gen.normal(0, 0.5, (d, d)).astype(np.float32) for _ in range(4)]
    vecs = [gen.normal(0, 0.5, d).astype(np.float32) for _ in range(4)]
    params = AttentionParams(
        parameter(mats[0]), parameter(vecs[0]), parameter(mats[1]), parameter(vecs[1]),
        parameter(mats[2]), parameter(vecs[2]), parameter(mats[3]), parameter(vecs[3]),
    )
    out = multi_head_attention(x_q, x_kv, params, n_heads)

    q = x_q @ mats[0] + vecs[0]
    k = x_kv @ mats[1] + vecs[1]
    v = x_kv @ mats[2] + vecs[2]
    heads = []
    for h in range(n_heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        heads.append(scaled_dot_attention(q[:, sl], k[:, sl], v[:, sl]).data)
    ref = np.concatenate(heads, axis=1) @ mats[3] + vecs[3]
    assert np.allclose(out.data, ref, atol=1e-5)


def test_multi_head_rejects_indivisible_dims():
    with pytest.raises(ConfigError):
        multi_head_attention(rand((2, 6), 0), rand((2, 6), 1), _identity_attention_params(6), n_heads=4)


# feed forward ----------------------------------------------------------


def _ff_params(w1, b1, w2, b2):
    return FeedForwardParams(parameter(w1), parameter(b1), parameter(w2), parameter(b2))


def test_feed_forward_zero_weights():
    params = _ff_params(np.zeros((3, 5), np.float32), np.zeros(5, np.float32),
                        np.zeros((5, 3), np.float32), np.zeros(3, np.float32))
    out = feed_forward(rand((2, 3), 5), params)
    assert np.allclose(out.data, 0.0)


def test_feed_forward_identity_on_nonnegative_input():
    eye = np.eye(3, dtype=np.float32)
    params = _ff_params(eye, np.zeros(3, np.float32), eye, np.zeros(3, np.float32))
    x = np.abs(rand((4, 3), 6))
    out = feed_forward(x, params)
    assert np.allclose(out.data, x, atol=1e-6)


def test_feed_forward_matches_matrix_arithmetic():
    gen = RngState(7, 0).generator()
    x = gen.normal(0, 1, (2, 4)).astype(np.float32)
    w1 = gen.normal(0, 1, (4, 8)).astype(np.float32)
    b1 = gen.normal(0, 1, 8).astype(np.float32)
    w2 = gen.normal(0, 1, (8, 4)).astype(np.float32)
    b2 = gen.normal(0, 1, 4).astype(np.float32)
    out = feed_forward(x, _ff_params(w1, b1, w2, b2))
    ref = np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
    assert np.allclose(out.data, ref, atol=1e-5)


# layer norm ------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    x = np.full((1, 6), 3.7, np.float32)
    out = layer_norm(x, np.ones(6, np.float32), np.zeros(6, np.float32))
    assert np.allclose(out.data, 0.0, atol=1e-4)


def test_layer_norm_two_point_row():
    out = layer_norm(np.array([[1.0, -1.0]], np.float32),
                     np.ones(2, np.float32), np.zeros(2, np.float32))
    assert np.allclose(out.data, [[0.9999950, -0.9999950]], atol=1e-5)


def test_layer_norm_zero_gain_returns_bias():
    bias = np.array([1.0, 2.0, 3.0], np.float32)
    out = layer_norm(rand((4, 3), 8), np.zeros(3, np.float32), bias)
    assert np.allclose(out.data, np.tile(bias, (4, 1)))


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_rows_standardized(seed):
    x = rand((6, 16), seed, scale=4.0)
    out = layer_norm(x, np.ones(16, np.float32), np.zeros(16, np.float32)).data
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-4)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-3)


# leaky relu ------------------------------------------------------------


def test_leaky_relu_values():
    out = leaky_relu(np.array([0.0, 5.0, -2.0], np.float32), slope=0.01)
    assert np.allclose(out.data, [0.0, 5.0, -0.02])


# dropout ---------------------------------------------------------------


def test_dropout_rate_zero_is_identity():
    x = rand((5, 5), 9)
    out = dropout(x, 0.0, RngState(0), training=True)
    assert np.array_equal(out.data, x)


def test_dropout_inference_is_identity():
    x = rand((5, 5), 9)
    out = dropout(x, 0.9, RngState(0), training=False)
    assert np.array_equal(out.data, x)


def test_dropout_preserves_mean():
    # law of large numbers: survivors are rescaled by 1/(1-rate)
    x = np.ones((400, 250), np.float32)
    out = dropout(x, 0.5, RngState(3), training=True)
    assert abs(float(out.data.mean()) - 1.0) < 0.01


def test_dropout_rejects_rate_one():
    with pytest.raises(ConfigError):
        dropout(rand((2, 2), 0), 1.0, RngState(0), training=True)


# xavier ----------------------------------------------------------------


def test_xavier_bound():
    w = xavier_init(3, 3, RngState(0))
    assert w.shape == (3, 3)
    assert np.abs(w).max() <= 1.0


def test_xavier_deterministic():
    assert np.array_equal(xavier_init(5, 7, RngState(11)), xavier_init(5, 7, RngState(11)))


def test_xavier_sample_mean_near_zero():
    draws = np.concatenate(
        [xavier_init(2, 4, RngState(100, i)).ravel() for i in range(1250)]
    )
    assert draws.size == 10_000
    assert abs(float(draws.mean())) < 0.02


# gradient checks -------------------------------------------------------


def test_grad_check_quadratic():
    theta = parameter(np.array([1.0, 2.0], np.float32))

    def loss_fn():
        return tsum(theta * theta) * 0.5

    assert grad_check(loss_fn, {"theta": theta}) < 1e-6


def test_grad_check_linear_bce():
    from signlookup.numerics import cols, reshape
    from signlookup.training import bce_loss

    gen = RngState(21, 0).generator()
    w = parameter(gen.normal(0, 0.5, (4, 2)).astype(np.float32))
    b = parameter(np.zeros(2, np.float32))
    x = gen.normal(0, 1, (6, 4)).astype(np.float32)
    y = (gen.random(6) < 0.5).astype(np.float32)

    def loss_fn():
        logits = linear(tensor(x), w, b)
        p = reshape(cols(softmax(logits), 1, 2), (-1,))
        return bce_loss(p, y)

    assert grad_check(loss_fn, {"w": w, "b": b}) < GRAD_TOL


def test_grad_check_full_tiny_model():
    from signlookup.cli import gradcheck_instance

    model, loss_fn = gradcheck_instance(0)
    assert grad_check(loss_fn, model.params) < GRAD_TOL


@pytest.mark.parametrize("seed", range(20))
def test_softmax_gradient_matches_finite_differences(seed):
    gen = RngState(seed, 5).generator()
    w = parameter(gen.normal(0, 0.4, (4, 4)).astype(np.float32))
    x = gen.normal(0, 1, (3, 4)).astype(np.float32)
    c = gen.normal(0, 1, (3, 4)).astype(np.float32)

    def loss_fn():
        return tsum(softmax(linear(tensor(x), w)) * c)

    assert grad_check(loss_fn, {"w": w}) < GRAD_TOL


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_gradient_matches_finite_differences(seed):
    gen = RngState(seed, 5).generator()
    d = 8
    w = parameter(gen.normal(0, 0.5, (d, d)).astype(np.float32))
    gain = parameter(gen.normal(1, 0.2, d).astype(np.float32))
    bias = parameter(gen.normal(0, 0.2, d).astype(np.float32))
    x = gen.normal(0, 1, (3, d)).astype(np.float32)
    c = gen.normal(0, 1, (3, d)).astype(np.float32)

    def loss_fn():
        return tsum(layer_norm(linear(tensor(x), w), gain, bias) * c)

    assert grad_check(loss_fn, {"w": w, "gain": gain, "bias": bias}) < GRAD_TOL


@pytest.mark.parametrize("seed", range(20))
def test_attention_gradient_matches_finite_differences(seed):
    gen = RngState(seed, 5).generator()
    d = 8
    mat = lambda: parameter(gen.normal(0, 0.3, (d, d)).astype(np.float32))
    vec = lambda: parameter(gen.normal(0, 0.2, d).astype(np.float32))
    params = AttentionParams(mat(), vec(), mat(), vec(), mat(), vec(), mat(), vec())
    x_q = gen.normal(0, 1, (3, d)).astype(np.float32)
    x_kv = gen.normal(0, 1, (5, d)).astype(np.float32)
    c = gen.normal(0, 1, (3, d)).astype(np.float32)

    def loss_fn():
        return tsum(multi_head_attention(tensor(x_q), tensor(x_kv), params, 2) * c)

    assert grad_check(loss_fn, params.named("attn")) < GRAD_TOL


@pytest.mark.parametrize("seed", range(20))
def test_relu_family_gradients_away_from_kinks(seed):
    # finite differences are undefined across the kink; keep inputs clear of 0
    gen = RngState(seed, 6).generator()
    signs = np.where(gen.random((3, 4)) < 0.5, -1.0, 1.0)
    x = (signs * gen.uniform(0.1, 1.0, (3, 4))).astype(np.float32)
    w = parameter(np.eye(4, dtype=np.float32) * 0.01)
    c = gen.normal(0, 1, (3, 4)).astype(np.float32)

    def loss_fn():
        shifted = tensor(x) + linear(tensor(np.abs(x)), w)
        return tsum(leaky_relu(shifted) * c)

    with watch_activation_kinks() as margins:
        with no_grad():
            loss_fn()
    assert min(margins) > 2e-2
    assert grad_check(loss_fn, {"w": w}) < GRAD_TOL


def test_dropout_gradient_with_fixed_mask():
    gen = RngState(3, 0).generator()
    w = parameter(gen.normal(0, 0.5, (4, 4)).astype(np.float32))
    x = gen.normal(0, 1, (3, 4)).astype(np.float32)
    c = gen.normal(0, 1, (3, 4)).astype(np.float32)

    def loss_fn():
        # RngState recreates the same generator per call, so the mask is fixed
        return tsum(dropout(linear(tensor(x), w), 0.4, RngState(77), True) * c)

    assert grad_check(loss_fn, {"w": w}) < GRAD_TOL


# determinism and finiteness --------------------------------------------


def test_operations_deterministic():
    x = rand((6, 8), 30)
    params = _identity_attention_params(8)
    a = multi_head_attention(x, x, params, 2).data
    b = multi_head_attention(x, x, params, 2).data
    assert np.array_equal(a, b)


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        Tensor(np.array([1.0, np.nan], np.float32))


def test_backward_accumulates_into_shared_leaf():
    theta = parameter(np.array([3.0], np.float32))
    loss = tsum(theta * theta)  # d/dtheta = 2*theta via two paths
    loss.backward()
    assert np.allclose(theta.grad, [6.0])

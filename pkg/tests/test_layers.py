import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from leafcascade import layers as L
from leafcascade.layers import BatchNormParams, ConvParams, ShapeError

from conftest import naive_conv, numeric_grad, rel_error


def conv_params(kernel, bias=None):
    kernel = np.asarray(kernel)
    if bias is None:
        bias = np.zeros(kernel.shape[0], dtype=kernel.dtype)
    return ConvParams(kernel, np.asarray(bias, dtype=kernel.dtype))


# -- conv -----------------------------------------------------------------


def test_conv_identity_kernel_scalar():
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1
    x = np.array([[[[2.5]]]], np.float32)
    assert L.conv2d_forward(x, conv_params(k))[0, 0, 0, 0] == 2.5


def test_conv_ones_window_sums():
    x = np.ones((1, 1, 3, 3), np.float32)
    y = L.conv2d_forward(x, conv_params(np.ones((1, 1, 3, 3), np.float32)))[0, 0]
    assert y[1, 1] == 9
    assert y[0, 0] == y[0, 2] == y[2, 0] == y[2, 2] == 4
    assert y[0, 1] == y[1, 0] == 6


def test_conv_matches_naive_loops(rng):
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    k = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    np.testing.assert_allclose(L.conv2d_forward(x, conv_params(k, b)), naive_conv(x, k, b), atol=1e-5)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        L.conv2d_forward(np.zeros((1, 3, 4, 4), np.float32), conv_params(np.zeros((2, 1, 3, 3), np.float32)))


def test_conv_params_reject_non_3x3():
    with pytest.raises(ShapeError):
        ConvParams(np.zeros((1, 1, 5, 5)), np.zeros(1))


def test_conv_backward_zero_grad(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    p = conv_params(rng.standard_normal((3, 2, 3, 3)))
    gi, gk, gb = L.conv2d_backward(x, p, np.zeros((2, 3, 4, 4)))
    assert not gi.any() and not gk.any() and not gb.any()


def test_conv_backward_scalar_chain_rule():
    x = np.array([[[[1.5]]]])
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 2.0
    gi, gk, gb = L.conv2d_backward(x, conv_params(k), np.array([[[[3.0]]]]))
    assert gk[0, 0, 1, 1] == 1.5 * 3.0
    assert gi[0, 0, 0, 0] == 2.0 * 3.0
    assert gb[0] == 3.0


def test_conv_backward_finite_differences(rng):
    x = rng.standard_normal((2, 2, 4, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((2, 3, 4, 5))

    def loss():
        return float((L.conv2d_forward(x, ConvParams(k, b)) * r).sum())

    gi, gk, gb = L.conv2d_backward(x, ConvParams(k, b), r)
    assert rel_error(gi, numeric_grad(loss, x)) < 1e-4
    assert rel_error(gk, numeric_grad(loss, k)) < 1e-4
    assert rel_error(gb, numeric_grad(loss, b)) < 1e-4


# -- batch norm -----------------------------------------------------------


def bn(c, dtype=np.float64, rng=None, eps=1e-3):
    if rng is None:
        return BatchNormParams(np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype), eps)
    return BatchNormParams(rng.uniform(0.5, 2, c), rng.standard_normal(c), rng.standard_normal(c),
                           rng.uniform(0.5, 2, c), eps)


def test_batchnorm_identity_in_infer(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    y, _ = L.batchnorm_forward(x, bn(3, eps=1e-12), "infer")
    np.testing.assert_allclose(y, x, atol=1e-9)


def test_batchnorm_train_normalises(rng):
    x = rng.standard_normal((16, 3, 8, 8)) * 5 + 2
    p = BatchNormParams(np.array([1.0, 2.0, 0.5]), np.array([0.0, -1.0, 3.0]), np.zeros(3), np.ones(3))
    y, _ = L.batchnorm_forward(x, p, "train")
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), p.beta, atol=1e-3)
    np.testing.assert_allclose(y.std(axis=(0, 2, 3)), p.gamma, atol=1e-3)


def test_batchnorm_matches_scalar_reference(rng):
    x = rng.standard_normal((2, 3, 3, 4)).astype(np.float32)
    p = bn(3, np.float32, rng)
    y, _ = L.batchnorm_forward(x, p, "infer")
    for b in range(2):
        for c in range(3):
            for i in range(3):
                for j in range(4):
                    ref = ((float(x[b, c, i, j]) - float(p.moving_mean[c])) / math.sqrt(float(p.moving_var[c]) + 1e-3)
                           * float(p.gamma[c]) + float(p.beta[c]))
                    assert abs(float(y[b, c, i, j]) - ref) < 1e-5


def test_batchnorm_moving_stats_update(rng):
    x = rng.standard_normal((4, 2, 3, 3))
    p = bn(2)
    _, new = L.batchnorm_forward(x, p, "train")
    np.testing.assert_allclose(new.moving_mean, 0.01 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(new.moving_var, 0.99 + 0.01 * x.var(axis=(0, 2, 3)))
    _, same = L.batchnorm_forward(x, p, "infer")
    assert same is p


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_batchnorm_backward_finite_differences(mode, rng):
    x = rng.standard_normal((3, 2, 3, 3))
    p = bn(2, rng=rng)
    gamma, beta = p.gamma.copy(), p.beta.copy()
    r = rng.standard_normal(x.shape)

    def loss():
        q = BatchNormParams(gamma, beta, p.moving_mean, p.moving_var, p.epsilon)
        return float((L.batchnorm_forward(x, q, mode)[0] * r).sum())

    gi, gg, gb = L.batchnorm_backward(x, BatchNormParams(gamma, beta, p.moving_mean, p.moving_var, p.epsilon), r, mode)
    assert rel_error(gi, numeric_grad(loss, x)) < 1e-4
    assert rel_error(gg, numeric_grad(loss, gamma)) < 1e-4
    assert rel_error(gb, numeric_grad(loss, beta)) < 1e-4


def test_batchnorm_channel_mismatch():
    with pytest.raises(ShapeError):
        L.batchnorm_forward(np.zeros((1, 3, 2, 2)), bn(2))


# -- relu / pooling -------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(L.relu(np.array([-3.0, 3.0, 0.0])), [0, 3, 0])


def test_relu_backward_finite_differences(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    r = rng.standard_normal(x.shape)
    assert rel_error(L.relu_backward(x, r), numeric_grad(lambda: float((L.relu(x) * r).sum()), x)) < 1e-4


def test_pool_single_window():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32)
    assert L.max_pool2(x)[0, 0, 0, 0] == 4
    assert L.avg_pool2(x)[0, 0, 0, 0] == 2.5


@pytest.mark.parametrize("size,expected", [(49, 24), (3, 1), (128, 64), (196, 98)])
def test_pool_floor_division(size, expected):
    x = np.zeros((1, 1, size, size), np.float32)
    assert L.max_pool2(x).shape[2:] == (expected, expected)
    assert L.avg_pool2(x).shape[2:] == (expected, expected)


def test_pool_too_small():
    with pytest.raises(ShapeError):
        L.max_pool2(np.zeros((1, 1, 1, 4)))
    with pytest.raises(ShapeError):
        L.avg_pool2(np.zeros((1, 1, 4, 1)))


def test_pool_backward_finite_differences(rng):
    x = rng.standard_normal((2, 2, 5, 5))
    r = rng.standard_normal((2, 2, 2, 2))
    gmax = L.max_pool2_backward(x, r)
    assert rel_error(gmax, numeric_grad(lambda: float((L.max_pool2(x) * r).sum()), x)) < 1e-4
    gavg = L.avg_pool2_backward(x.shape, r)
    assert rel_error(gavg, numeric_grad(lambda: float((L.avg_pool2(x) * r).sum()), x)) < 1e-4


# -- dense / softmax ------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(L.softmax(np.full(7, 3.3)), np.full(7, 1 / 7))


def test_softmax_stable():
    p = L.softmax(np.array([1000.0, 0.0], np.float32))
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [1, 0], atol=1e-7)


def test_softmax_matches_64bit_reference(rng):
    logits = rng.standard_normal((5, 9)).astype(np.float32) * 4
    ref = np.exp(logits.astype(np.float64))
    ref /= ref.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(L.softmax(logits), ref, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(logits, shift):
    p = L.softmax(logits)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-6
    np.testing.assert_allclose(L.softmax(logits + shift), p, atol=1e-6)


def test_softmax_backward_finite_differences(rng):
    z = rng.standard_normal((3, 5))
    r = rng.standard_normal((3, 5))
    g = L.softmax_backward(L.softmax(z), r)
    assert rel_error(g, numeric_grad(lambda: float((L.softmax(z) * r).sum()), z)) < 1e-4


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        L.dense_forward(np.zeros((1, 4)), np.zeros((5, 2)), np.zeros(2))


def test_dense_backward_finite_differences(rng):
    x = rng.standard_normal((3, 6))
    w = rng.standard_normal((6, 4))
    b = rng.standard_normal(4)
    r = rng.standard_normal((3, 4))

    def loss():
        return float((L.dense_forward(x, w, b) * r).sum())

    gi, gw, gb = L.dense_backward(x, w, r)
    assert rel_error(gi, numeric_grad(loss, x)) < 1e-4
    assert rel_error(gw, numeric_grad(loss, w)) < 1e-4
    assert rel_error(gb, numeric_grad(loss, b)) < 1e-4


# -- dropout --------------------------------------------------------------


def test_dropout_infer_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    y, mask = L.dropout(x, 0.5, "infer", rng)
    assert y is x and mask is None


def test_dropout_rate_zero_train(rng):
    x = rng.standard_normal((2, 3)).astype(np.float32)
    y, _ = L.dropout(x, 0.0, "train", rng)
    np.testing.assert_array_equal(y, x)


def test_dropout_preserves_expectation(rng):
    x = np.ones((200_000,), np.float32)
    y, mask = L.dropout(x, 0.5, "train", rng)
    assert abs(y.mean() - 1.0) < 0.05
    assert set(np.unique(y)) <= {0.0, 2.0}
    np.testing.assert_array_equal(L.dropout_backward(mask, x), y)


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rate_out_of_range(rate):
    with pytest.raises(ValueError):
        L.dropout(np.ones(3), rate, "train")

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrrn.autodiff import (BatchNormStats, ShapeError, Tape, Tensor, batch_norm, concat_channels, conv2d,
                           maxpool2x2, relu, softmax, softmax_ce_loss, sum_all, upsample_nearest2x)
from oracles import batch_norm_two_pass, block_sum, conv2d_direct, maxpool_windows, softmax_ce_mp


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- conv2d

def test_conv1x1_identity(rng):
    x = rng.standard_normal((2, 1, 5, 7))
    out = conv2d(T(x), T(np.ones((1, 1, 1, 1))), T([0.0]))
    assert np.array_equal(out.data, x)


def test_conv3x3_all_ones_on_constant():
    out = conv2d(T(np.full((1, 1, 4, 4), 2.0)), T(np.ones((1, 1, 3, 3))), T([0.0])).data[0, 0]
    expected = np.array([[8, 12, 12, 8], [12, 18, 18, 12], [12, 18, 18, 12], [8, 12, 12, 8]], dtype=float)
    assert np.array_equal(out, expected)


def test_conv3x3_impulse_stamps_flipped_kernel(rng):
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    w = rng.standard_normal((1, 1, 3, 3))
    out = conv2d(T(x), T(w)).data[0, 0]
    stamp = np.zeros((5, 5))
    stamp[1:4, 1:4] = w[0, 0, ::-1, ::-1]
    assert np.allclose(out, stamp, rtol=0, atol=1e-15)
    assert np.allclose(out, conv2d_direct(x, w)[0, 0], rtol=0, atol=1e-15)


@pytest.mark.parametrize("k", [1, 3])
def test_conv_matches_direct_oracle(rng, k):
    for _ in range(5):
        n, ci, co = rng.integers(1, 3, size=3)
        h, w = rng.integers(1, 7, size=2)
        x = rng.standard_normal((n, ci, h, w))
        wt = rng.standard_normal((co, ci, k, k))
        b = rng.standard_normal(co)
        assert np.allclose(conv2d(T(x), T(wt), T(b)).data, conv2d_direct(x, wt, b), rtol=1e-12, atol=1e-12)


def test_conv_f32_matches_oracle(rng):
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(w))
    assert out.dtype == np.float32
    assert np.allclose(out.data, conv2d_direct(x, w), rtol=1e-5, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(alpha=st.floats(-3, 3), beta=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_conv_linearity(alpha, beta, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 2, 2, 5, 5))
    w = T(r.standard_normal((3, 2, 3, 3)))
    lhs = conv2d(T(alpha * x + beta * y), w).data
    rhs = alpha * conv2d(T(x), w).data + beta * conv2d(T(y), w).data
    scale = max(np.abs(lhs).max(), np.abs(rhs).max(), 1e-300)
    assert np.abs(lhs - rhs).max() / scale < 1e-5


def test_conv_shape_errors(rng):
    x = T(rng.standard_normal((1, 2, 4, 4)))
    with pytest.raises(ShapeError, match="c_in|channel"):
        conv2d(x, T(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="kernel"):
        conv2d(x, T(np.ones((1, 2, 5, 5))))
    with pytest.raises(ShapeError, match="bias"):
        conv2d(x, T(np.ones((4, 2, 3, 3))), T(np.zeros(3)))


# ---------------------------------------------------------------- relu

def test_relu_examples():
    assert relu(T([[[[-1.0, 0.0, 2.0]]]])).data.ravel().tolist() == [0, 0, 2]


def test_relu_all_negative_gradient_zero(rng):
    x = T(-rng.uniform(0.1, 1, (1, 2, 3, 3)), grad=True)
    with Tape() as tape:
        y = relu(x)
        loss = sum_all(y)
    assert not y.data.any()
    tape.backward(loss)
    assert not x.grad.any()


def test_relu_matches_elementwise_oracle(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    expected = np.vectorize(lambda v: v if v > 0 else 0.0)(x)
    assert np.array_equal(relu(T(x)).data, expected)


def test_relu_subgradient_at_zero_is_zero():
    x = T(np.zeros((1, 1, 1, 3)), grad=True)
    with Tape() as tape:
        loss = sum_all(relu(x))
    tape.backward(loss)
    assert not x.grad.any()


# ---------------------------------------------------------------- batch norm

def test_bn_normalizes(rng):
    c = 3
    x = rng.standard_normal((2, c, 4, 4)) * 5 + 3
    out = batch_norm(T(x), T(np.ones(c)), T(np.zeros(c)), mode="train").data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4


def test_bn_constant_channel_gives_beta():
    x = np.full((2, 2, 3, 3), 7.5)
    beta = np.array([0.25, -1.5])
    out = batch_norm(T(x), T(np.array([2.0, 3.0])), T(beta), mode="train").data
    assert np.array_equal(out, np.broadcast_to(beta[None, :, None, None], x.shape))


def test_bn_matches_two_pass_oracle(rng):
    for _ in range(5):
        c = int(rng.integers(1, 4))
        x = rng.standard_normal((2, c, 3, 5)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
        g, b = rng.standard_normal(c), rng.standard_normal(c)
        out = batch_norm(T(x), T(g), T(b), mode="train").data
        assert np.abs(out - batch_norm_two_pass(x, g, b)).max() < 1e-6


def test_bn_running_stats_update(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    stats = BatchNormStats.empty(2, np.float64)
    batch_norm(T(x), T(np.ones(2)), T(np.zeros(2)), mode="train", running=stats)
    assert stats.count == 1
    assert np.allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_bn_eval_uses_running_stats(rng):
    x = rng.standard_normal((1, 2, 2, 2))
    stats = BatchNormStats(np.array([1.0, -1.0]), np.array([4.0, 0.25]), 3)
    out = batch_norm(T(x), T(np.ones(2)), T(np.zeros(2)), mode="eval", running=stats).data
    expected = (x - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + 1e-5)
    assert np.allclose(out, expected, rtol=1e-14)
    assert stats.count == 3


def test_bn_eval_unpopulated_raises():
    with pytest.raises(ValueError, match="running"):
        batch_norm(T(np.ones((1, 1, 2, 2))), T([1.0]), T([0.0]), mode="eval",
                   running=BatchNormStats.empty(1, np.float64))


# ---------------------------------------------------------------- pool / upsample / concat

def test_maxpool_examples():
    assert maxpool2x2(T([[[[1.0, 2.0], [3.0, 4.0]]]])).data.ravel().tolist() == [4.0]
    assert np.array_equal(maxpool2x2(T(np.full((1, 2, 4, 6), 3.0))).data, np.full((1, 2, 2, 3), 3.0))


def test_maxpool_matches_window_oracle(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    assert np.array_equal(maxpool2x2(T(x)).data, maxpool_windows(x))


def test_maxpool_tie_goes_to_first_in_scan_order():
    x = T(np.full((1, 1, 2, 2), 1.0), grad=True)
    with Tape() as tape:
        loss = sum_all(maxpool2x2(x))
    tape.backward(loss)
    assert x.grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]
    y = T([[[[0.0, 5.0], [5.0, 1.0]]]], grad=True)
    with Tape() as tape:
        loss = sum_all(maxpool2x2(y))
    tape.backward(loss)
    assert y.grad[0, 0].tolist() == [[0.0, 1.0], [0.0, 0.0]]


def test_maxpool_odd_size_raises():
    with pytest.raises(ShapeError):
        maxpool2x2(T(np.zeros((1, 1, 3, 4))))


def test_upsample_examples(rng):
    assert upsample_nearest2x(T([[[[5.0]]]])).data.tolist() == [[[[5.0, 5.0], [5.0, 5.0]]]]
    x = rng.standard_normal((2, 2, 3, 4))
    assert np.array_equal(maxpool2x2(upsample_nearest2x(T(x))).data, x)


def test_upsample_backward_is_block_sum(rng):
    # dyadic rationals make every partial sum exact
    g = rng.integers(-64, 64, (2, 3, 6, 4)) / 8.0
    x = T(rng.standard_normal((2, 3, 3, 2)), grad=True)
    with Tape() as tape:
        y = upsample_nearest2x(x)
    tape.backward(y, grad=g)
    assert np.array_equal(x.grad, block_sum(g))


def test_concat_shapes_and_slices(rng):
    a, b = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))
    out = concat_channels(T(a), T(b)).data
    assert out.shape == (2, 5, 3, 3)
    assert np.array_equal(out[:, :2], a) and np.array_equal(out[:, 2:], b)
    assert np.array_equal(concat_channels(T(a), T(np.zeros((2, 0, 3, 3)))).data, a)


def test_concat_backward_splits(rng):
    a, b = T(rng.standard_normal((1, 2, 2, 2)), grad=True), T(rng.standard_normal((1, 1, 2, 2)), grad=True)
    g = rng.standard_normal((1, 3, 2, 2))
    with Tape() as tape:
        y = concat_channels(a, b)
    tape.backward(y, grad=g)
    assert np.array_equal(a.grad, g[:, :2]) and np.array_equal(b.grad, g[:, 2:])


def test_concat_mismatch_names_dimension(rng):
    with pytest.raises(ShapeError, match="height|h"):
        concat_channels(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 4, 2))))
    with pytest.raises(ShapeError, match="batch|n"):
        concat_channels(T(np.zeros((1, 1, 2, 2))), T(np.zeros((2, 1, 2, 2))))


# ---------------------------------------------------------------- softmax cross-entropy

def test_ce_uniform_is_ln6():
    loss = softmax_ce_loss(T(np.zeros((1, 6, 2, 2))), np.zeros((1, 2, 2), dtype=np.int64))
    assert abs(loss.item() - math.log(6)) < 1e-12
    assert abs(loss.item() - 1.791759) < 1e-6


def test_ce_saturated_is_zero():
    logits = np.zeros((1, 6, 1, 1))
    logits[0, 3] = 1000.0
    loss = softmax_ce_loss(T(logits), np.array([[[3]]]))
    assert loss.item() == 0.0 or abs(loss.item()) < 1e-12


def test_ce_matches_high_precision_oracle(rng):
    logits = rng.standard_normal((2, 6, 4, 4)) * 3
    target = rng.integers(0, 6, (2, 4, 4))
    loss = softmax_ce_loss(T(logits), target).item()
    assert abs(loss - float(softmax_ce_mp(logits, target))) < 1e-6


def test_ce_f32_loss_is_accurate(rng):
    logits = (rng.standard_normal((2, 6, 4, 4)) * 3).astype(np.float32)
    target = rng.integers(0, 6, (2, 4, 4))
    loss = softmax_ce_loss(Tensor(logits), target).item()
    assert abs(loss - float(softmax_ce_mp(logits, target))) < 1e-6


def test_ce_gradient_formula(rng):
    logits = T(rng.standard_normal((1, 6, 2, 3)), grad=True)
    target = rng.integers(0, 6, (1, 2, 3))
    with Tape() as tape:
        loss = softmax_ce_loss(logits, target)
    tape.backward(loss)
    onehot = np.moveaxis(np.eye(6)[target], -1, 1)
    assert np.allclose(logits.grad, (softmax(logits.data) - onehot) / 6, rtol=1e-12, atol=1e-15)


def test_ce_out_of_range_label_raises():
    with pytest.raises(ValueError, match="label"):
        softmax_ce_loss(T(np.zeros((1, 6, 1, 1))), np.array([[[6]]]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.01, 50))
def test_ce_nonnegative_and_softmax_normalized(seed, scale):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((1, 6, 3, 3)) * scale
    target = r.integers(0, 6, (1, 3, 3))
    assert softmax_ce_loss(T(logits), target).item() >= 0
    for dt in (np.float32, np.float64):
        p = softmax(logits.astype(dt))
        assert np.abs(p.sum(axis=1) - 1).max() <= 1e-6

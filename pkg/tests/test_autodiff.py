import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases
from skelres.autodiff import (
    BatchNorm2d,
    Dropout,
    Linear,
    NoForwardCache,
    ReLU,
    conv2d,
    conv_output_size,
    fully_connected,
    global_mean_pool,
    global_mean_pool_backward,
    grad_check,
    make_rng,
    one_hot,
    relu,
    relu_backward,
    softmax,
    softmax_cross_entropy,
)
from skelres.errors import ShapeError


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, ch, i * stride + di, j * stride + dj] * w[o, ch, di, dj]
                    out[b, o, i, j] = acc
    return out


# ---------------------------------------------------------------- conv

def test_conv_all_ones():
    out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), 1, 1)
    assert out[0, 0, 1, 1] == 9.0
    assert out[0, 0, 0, 0] == out[0, 0, 2, 2] == 4.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((2, 1, 5, 4))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d(x, k), x)


def test_conv_output_size():
    assert conv2d(np.zeros((1, 3, 32, 32)), np.zeros((4, 3, 3, 3)), 2).shape == (1, 4, 16, 16)
    assert conv2d(np.zeros((1, 3, 32, 32)), np.zeros((4, 3, 1, 1)), 2).shape == (1, 4, 16, 16)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 8), f=st.integers(1, 4),
    h=st.integers(1, 9), w=st.integers(1, 9),
    k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]), seed=st.integers(0, 2**32 - 1),
)
def test_conv_matches_loop_reference(n, c, f, h, w, k, stride, seed):
    rng = np.random.default_rng(seed)
    x, wt = rng.standard_normal((n, c, h, w)), rng.standard_normal((f, c, k, k))
    np.testing.assert_allclose(conv2d(x, wt, stride), naive_conv(x, wt, stride, k // 2),
                               rtol=1e-5, atol=1e-12)


# ---------------------------------------------------------------- batch norm

def test_bn_train_standardizes():
    x = np.random.default_rng(0).normal(3, 2, (8, 4, 5, 5)).astype(np.float32)
    y = BatchNorm2d(4).forward(x, train=True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)  # eps shaves ~1e-5 off


def test_bn_standardized_input_passes_through():
    x = np.random.default_rng(1).standard_normal((16, 2, 6, 6))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y = BatchNorm2d(2, dtype=np.float64).forward(x, train=True)
    np.testing.assert_allclose(y, x, rtol=1e-5)  # eps = 1e-5 scales by 1/sqrt(1 + eps)


def test_bn_eval_on_running_mean_gives_beta():
    bn = BatchNorm2d(3, dtype=np.float64)
    bn.running_mean[...] = [1.0, -2.0, 0.5]
    bn.running_var[...] = [4.0, 0.25, 9.0]
    bn.beta.data[...] = [0.3, -0.7, 1.1]
    bn.gamma.data[...] = [2.0, 3.0, 4.0]
    x = np.broadcast_to(bn.running_mean[None, :, None, None], (2, 3, 2, 2)).copy()
    np.testing.assert_allclose(bn.forward(x), np.broadcast_to(bn.beta.data[None, :, None, None], x.shape))


def test_bn_running_stats_update():
    bn = BatchNorm2d(1, dtype=np.float64)
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    bn.forward(x, train=True)
    assert bn.running_mean[0] == pytest.approx(0.9 * 0 + 0.1 * 2.0)
    assert bn.running_var[0] == pytest.approx(0.9 * 1 + 0.1 * 2.0)  # unbiased batch variance is 2


def test_bn_batch_of_one_rejected():
    with pytest.raises(ShapeError):
        BatchNorm2d(2).forward(np.zeros((1, 2, 3, 3), np.float32), train=True)


def test_bn_eval_converges_to_train():
    rng = make_rng(0)
    bn = BatchNorm2d(3, dtype=np.float64)
    probe = rng.normal(1.5, 2.0, (64, 3, 4, 4))
    gaps = []
    for step in range(60):
        bn.forward(rng.normal(1.5, 2.0, (64, 3, 4, 4)), train=True)
        if step in (2, 10, 59):
            gaps.append(np.abs(bn.forward(probe) - BatchNorm2d(3, dtype=np.float64).forward(probe, train=True)).mean())
    assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 0.05


# ---------------------------------------------------------------- relu, dropout, pool, fc

def test_relu_examples():
    assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    x = np.array([0.5, 3.0])
    np.testing.assert_array_equal(relu(x), x)
    assert relu_backward(np.array([1.0, 1.0]), np.array([-0.5, 0.5])).tolist() == [0, 1]


def test_relu_module_backward_without_forward():
    with pytest.raises(NoForwardCache):
        ReLU().backward(np.zeros(3))


def test_dropout_identity_cases():
    x = np.random.default_rng(0).random((4, 5)).astype(np.float32)
    assert Dropout(0.5).forward(x) is x
    d = Dropout(0.0)
    np.testing.assert_array_equal(d.forward(x, train=True), x)
    np.testing.assert_array_equal(d.backward(x), x)
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_dropout_statistics():
    x = np.ones(10**6, dtype=np.float64)
    y = Dropout(0.5).forward(x, train=True, rng=make_rng(7))
    assert abs(np.mean(y != 0) - 0.5) < 0.01
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) == {0.0, 2.0}


def test_dropout_backward_uses_mask():
    d = Dropout(0.5)
    y = d.forward(np.ones(100), train=True, rng=make_rng(1))
    np.testing.assert_array_equal(d.backward(np.ones(100)), y)


def test_pool_examples():
    assert global_mean_pool(np.full((1, 2, 3, 3), 4.0)).tolist() == [[4.0, 4.0]]
    assert global_mean_pool(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2))[0, 0] == 2.5
    np.testing.assert_array_equal(global_mean_pool_backward(np.ones((1, 1)), (1, 1, 2, 2)), np.full((1, 1, 2, 2), 0.25))


def test_fc_examples():
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(fully_connected(x, np.eye(2), np.zeros(2)), x)
    np.testing.assert_array_equal(fully_connected(x, np.zeros((3, 2)), np.array([1.0, 2, 3])), [[1, 2, 3]])
    w = np.array([[1.0, -1.0], [2.0, 0.5]])
    np.testing.assert_array_equal(fully_connected(x, w, np.array([0.5, 0.0])), [[-0.5, 3.0]])
    with pytest.raises(ShapeError):
        Linear(3, 2).forward(np.zeros((1, 2), np.float32))


# ---------------------------------------------------------------- softmax / loss

def test_uniform_logits_loss_is_log_c():
    loss, grad = softmax_cross_entropy(np.zeros((5, 4)), one_hot([0, 1, 2, 3, 0], 4))
    assert loss == pytest.approx(1.386294, abs=1e-6)
    assert loss == pytest.approx(math.log(4))
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)


def test_peaked_logits_loss_vanishes():
    logits = np.array([[50.0, 0.0, 0.0]])
    loss, _ = softmax_cross_entropy(logits, one_hot([0], 3))
    assert loss < 1e-20


def test_loss_rejects_non_one_hot():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 3)), np.array([[0.5, 0.5, 0.0]]))
    with pytest.raises(ShapeError):
        softmax_cross_entropy(np.zeros((1, 3)), np.zeros((1, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(2, 10), st.floats(0.1, 200))
def test_softmax_is_a_distribution(seed, m, c, scale):
    p = softmax(np.random.default_rng(seed).standard_normal((m, c)) * scale)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


# ---------------------------------------------------------------- gradient checks

def test_grad_check_on_linear_op_is_exact():
    a = np.random.default_rng(0).standard_normal((3, 3))
    x = np.random.default_rng(1).standard_normal(3)
    report = grad_check(lambda v: a @ v, lambda dy: (a.T @ dy,), {"x": x})
    assert report.max_rel_error < 1e-9


def test_grad_check_catches_wrong_gradient():
    x = np.random.default_rng(1).standard_normal(4)
    report = grad_check(lambda v: v ** 2, lambda dy: (dy * x,), {"x": x})  # missing factor 2
    assert not report.passed


FAST_OPS = [name for name in gradcases.OP_CASES if name != "mini_resnet"]


@pytest.mark.parametrize("dtype", [np.float64, np.float32], ids=["double", "single"])
@pytest.mark.parametrize("op", FAST_OPS)
def test_op_gradients(op, dtype):
    for seed in range(20):
        report = gradcases.OP_CASES[op](seed, dtype)
        assert report.passed, (seed, report.per_input)


@pytest.mark.parametrize("dtype", [np.float64, np.float32], ids=["double", "single"])
def test_mini_network_gradients(dtype):
    for seed in range(3):
        report = gradcases.mini_net_case(seed, dtype)
        assert report.passed, (seed, report.per_input)

"""Gradient-check cases shared by the unit tests and the acceptance suite.

Each case builder takes a seed and a dtype and returns a GradCheckReport.
Single-precision cases compare float32 analytic gradients against central
differences taken on float64 twins of the same inputs.
"""

import numpy as np

from skelres.autodiff import (
    BatchNorm2d,
    conv2d,
    conv2d_backward,
    fully_connected,
    fully_connected_backward,
    global_mean_pool,
    global_mean_pool_backward,
    grad_check,
    make_rng,
    one_hot,
    relu,
    relu_backward,
    softmax_cross_entropy,
)
from skelres.autodiff import GradCheckReport, numeric_gradient, relative_error
from skelres.network import NetworkSpec, ResNet

DOUBLE_TOL = 1e-6
SINGLE_TOL = 1e-3
# the miniature network composes many ops, so round-off in the loss matters
# more; a slightly larger step balances it against truncation error
NET_STEP = 2e-5
KINK_MARGIN = 5e-4


def _check(forward, backward, inputs, dtype, seed, tol):
    ref = {k: v.astype(np.float64) for k, v in inputs.items()}
    cast = {k: v.astype(dtype) for k, v in inputs.items()}
    return grad_check(forward, backward, cast, tol, h=1e-5 if dtype == np.float64 else 1e-4,
                      seed=seed + 7919, reference=ref)  # probe stream unrelated to inputs


def _tol(dtype):
    return DOUBLE_TOL if dtype == np.float64 else SINGLE_TOL


def conv_case(seed, dtype=np.float64):
    rng = make_rng(seed)
    n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    h, w = rng.integers(3, 7), rng.integers(3, 7)
    inputs = {"x": rng.standard_normal((n, c, h, w)), "w": rng.standard_normal((f, c, k, k))}
    return _check(
        lambda x, wt: conv2d(x, wt, stride),
        lambda dy: conv2d_backward(dy, inputs["x"].astype(dtype), inputs["w"].astype(dtype), stride),
        inputs, dtype, seed, _tol(dtype),
    )


def batchnorm_case(seed, dtype=np.float64):
    rng = make_rng(seed)
    n, c, h, w = rng.integers(2, 4), rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 4)
    x = rng.standard_normal((n, c, h, w)) * rng.uniform(0.5, 3) + rng.uniform(-2, 2)
    gamma, beta = rng.uniform(0.5, 2, c), rng.standard_normal(c)

    def fwd(x, g, b):
        bn = BatchNorm2d(c, dtype=x.dtype)
        bn.gamma.data[...] = g
        bn.beta.data[...] = b
        fwd.bn = bn
        return bn.forward(x, train=True)

    def bwd(dy):
        fwd(inputs["x"].astype(dtype), gamma.astype(dtype), beta.astype(dtype))
        dx = fwd.bn.backward(dy)
        return dx, fwd.bn.gamma.grad, fwd.bn.beta.grad

    inputs = {"x": x, "gamma": gamma, "beta": beta}
    return _check(fwd, bwd, inputs, dtype, seed, _tol(dtype))


def relu_case(seed, dtype=np.float64):
    rng = make_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    x += np.sign(x) * 0.05  # keep probes away from the kink
    return _check(relu, lambda dy: (relu_backward(dy, x.astype(dtype)),), {"x": x}, dtype, seed, _tol(dtype))


def dropout_case(seed, dtype=np.float64):
    # with a fixed mask dropout is linear in its input
    rng = make_rng(seed)
    x = rng.standard_normal((3, 2, 4, 4))
    rate = float(rng.uniform(0.1, 0.9))
    mask = (rng.random(x.shape) >= rate) / (1 - rate)
    return _check(lambda v: v * mask, lambda dy: (dy * mask.astype(dtype),), {"x": x}, dtype, seed, _tol(dtype))


def pool_case(seed, dtype=np.float64):
    rng = make_rng(seed)
    x = rng.standard_normal((2, 3, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    return _check(global_mean_pool, lambda dy: (global_mean_pool_backward(dy, x.shape),),
                  {"x": x}, dtype, seed, _tol(dtype))


def fc_case(seed, dtype=np.float64):
    rng = make_rng(seed)
    n, i, o = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 5)
    inputs = {"x": rng.standard_normal((n, i)), "w": rng.standard_normal((o, i)), "b": rng.standard_normal(o)}
    return _check(
        fully_connected,
        lambda dy: fully_connected_backward(dy, inputs["x"].astype(dtype), inputs["w"].astype(dtype)),
        inputs, dtype, seed, _tol(dtype),
    )


def softmax_ce_case(seed, dtype=np.float64):
    rng = make_rng(seed)
    m, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    logits = rng.standard_normal((m, c)) * 2
    y = one_hot(rng.integers(0, c, m), c)
    analytic = softmax_cross_entropy(logits.astype(dtype), y.astype(dtype))[1]
    ref = logits.copy()
    numeric = numeric_gradient(lambda: softmax_cross_entropy(ref, y)[0], ref,
                               1e-5 if dtype == np.float64 else 1e-4)
    err = relative_error(analytic, numeric)
    return GradCheckReport(err, _tol(dtype), {"logits": err})


def mini_net_case(seed, dtype=np.float64):
    """6-layer residual net (stem, one unit per stage, FC) on 8x8 inputs."""
    rng = make_rng(seed)
    spec = NetworkSpec(6, 3, widths=(2, 3), input_size=8)
    net = ResNet(spec, rng=seed, dtype=np.float64)
    for _, m in net.named_modules():
        if isinstance(m, BatchNorm2d):
            m.gamma.data[...] = rng.uniform(0.5, 1.5, m.gamma.data.shape)
            m.beta.data[...] = rng.standard_normal(m.beta.data.shape) * 0.1
    y = one_hot(rng.integers(0, 3, 3), 3)
    ref_params = {k: p.data.copy() for k, p in net.parameters().items()}

    def loss_of(model, inp):
        logits = model.forward(inp, train=True, rng=make_rng(seed + 1))  # same masks every call
        return softmax_cross_entropy(logits, y.astype(logits.dtype))

    # redraw the input until no ReLU sits within KINK_MARGIN of its kink, so
    # the central differences never straddle one
    relus = [net.stem_relu] + [r for u in net.units for r in (u.relu1, u.relu_out)]
    while True:
        x = rng.standard_normal((3, 3, 8, 8))
        loss_of(net, x)
        margin = min(np.abs(r._cache).min() for r in relus)
        if margin > KINK_MARGIN:
            break

    # analytic pass in the requested precision
    work = ResNet(spec, rng=seed, dtype=dtype)
    for k, p in work.parameters().items():
        p.data[...] = ref_params[k]
    work.zero_grad()
    _, dlogits = loss_of(work, x.astype(dtype))
    dx = work.backward(dlogits)
    analytic = {k: p.grad for k, p in work.parameters().items()}

    h = NET_STEP
    report = GradCheckReport(0.0, _tol(dtype))
    params = net.parameters()
    for k, p in params.items():
        num = numeric_gradient(lambda: loss_of(net, x)[0], p.data, h)
        report.per_input[k] = relative_error(analytic[k], num)
    report.per_input["input"] = relative_error(dx, numeric_gradient(lambda: loss_of(net, x)[0], x, h))
    report.max_rel_error = max(report.per_input.values())
    return report


OP_CASES = {
    "conv2d": conv_case,
    "batch_norm": batchnorm_case,
    "relu": relu_case,
    "dropout": dropout_case,
    "global_mean_pool": pool_case,
    "fully_connected": fc_case,
    "softmax_cross_entropy": softmax_ce_case,
    "mini_resnet": mini_net_case,
}

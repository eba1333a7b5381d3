"""Independent reference computations used by several test modules."""

import numpy as np


def appendix_layers(depth, num_classes):
    """Layer inventory written out the way the architecture tables list it.

    Returns (kind, shape) rows; shapes are the trainable tensors of each layer.
    """
    n = (depth - 2) // 6
    rows = [("conv3x3", (16, 3, 3, 3)), ("bn", (16,)), ("bn", (16,))]
    cin = 16
    for width in (16, 32, 64):
        for u in range(n):
            rows += [("conv3x3", (width, cin, 3, 3)), ("bn", (width,)), ("bn", (width,)),
                     ("conv3x3", (width, width, 3, 3)), ("bn", (width,)), ("bn", (width,))]
            if cin != width:
                rows += [("conv1x1", (width, cin, 1, 1)), ("bn", (width,)), ("bn", (width,))]
            cin = width
    rows += [("fc", (num_classes, 64)), ("fc", (num_classes,))]
    return rows


def enumerate_parameters(depth, num_classes):
    return sum(int(np.prod(shape)) for _, shape in appendix_layers(depth, num_classes))


def conv_shift_sum(x, w, stride):
    """Convolution as a sum of shifted, channel-contracted copies of the input."""
    k = w.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h, wd = x.shape[2], x.shape[3]
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((x.shape[0], w.shape[0], ho, wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += np.einsum("nchw,fc->nfhw", patch, w[:, :, i, j])
    return out


def bn_eval(x, gamma, beta, mean, var, eps=1e-5):
    shape = (1, -1, 1, 1)
    return (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps) * gamma.reshape(shape) + beta.reshape(shape)


def zero_branch_forward(net, x):
    """Eval-mode output of ``net`` when every residual branch contributes 0.

    Identity units then map v to relu(v) = v; projection units reduce to
    relu(bn(conv1x1/2(v))).
    """
    relu = lambda v: np.maximum(v, 0)
    bn = lambda m, v: bn_eval(v, m.gamma.data, m.beta.data, m.running_mean, m.running_var, m.eps)
    h = relu(bn(net.stem_bn, conv_shift_sum(x, net.stem.weight.data, 1)))
    for unit in net.units:
        if unit.proj is not None:
            h = relu(bn(unit.proj_bn, conv_shift_sum(h, unit.proj.weight.data, 2)))
    feats = h.mean(axis=(2, 3))
    return feats @ net.fc.weight.data.T + net.fc.bias.data

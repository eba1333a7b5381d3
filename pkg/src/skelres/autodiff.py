"""Layer primitives with hand-written backward passes.

Activations are plain numpy arrays in N x C x H x W layout.  Trainable
tensors are wrapped in :class:`Parameter`, which pairs the data with a
gradient buffer of the same shape.  Every layer caches what its backward
pass needs during a train-mode forward and drops the cache once backward
has consumed it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NoForwardCache, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Parameter:
    """A trainable tensor and its gradient buffer.

    ``decay`` marks tensors that receive weight decay (conv and FC weights).
    """

    __slots__ = ("data", "grad", "decay")

    def __init__(self, data: np.ndarray, decay: bool = False):
        self.data = data
        self.grad = np.zeros_like(data)
        self.decay = decay

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype}, decay={self.decay})"


def make_rng(seed) -> np.random.Generator:
    """Project-wide generator: PCG64, reproducible across platforms."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


# --------------------------------------------------------------------------
# Functional kernels
# --------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Transposed patch matrix with rows (ki, kj, c) and columns (n, ho, wo).

    Building the transpose keeps every copied run along the image width, so
    the gather is a handful of long contiguous copies instead of many tiny
    ones.
    """
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((k, k, c, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(k * k * c, n * ho * wo), ho, wo


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    # (F, C, k, k) -> (F, k*k*C), matching the row order of _im2col
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int | None = None) -> np.ndarray:
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (F,C,k,k), zero padded.

    ``pad`` defaults to ``k // 2`` so that stride 1 preserves spatial size.
    """
    f, c, k, k2 = w.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"conv2d: input {x.shape} does not match weights {w.shape}")
    if k != k2:
        raise ShapeError("conv2d: kernels must be square")
    if pad is None:
        pad = k // 2
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = _weight_matrix(w) @ cols
    return np.ascontiguousarray(out.reshape(f, x.shape[0], ho, wo).transpose(1, 0, 2, 3))


def conv2d_backward(dy, x, w, stride=1, pad=None):
    """Gradients of :func:`conv2d` with respect to ``x`` and ``w``."""
    f, c, k, _ = w.shape
    if pad is None:
        pad = k // 2
    n, _, h, wd = x.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    dy_mat = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(f, -1)
    dw = (dy_mat @ cols.T).reshape(f, k, k, c).transpose(0, 3, 1, 2)
    dcols = (_weight_matrix(w).T @ dy_mat).reshape(k, k, c, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def global_mean_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def global_mean_pool_backward(dy: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    return np.broadcast_to((dy / (h * w))[:, :, None, None], shape).copy()


def fully_connected(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x`` (N, in) times ``w`` (out, in) transposed, plus ``b``."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} does not match weights {w.shape}")
    return x @ w.T + b


def fully_connected_backward(dy, x, w):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    ``targets`` must be one-hot rows.
    """
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if not (np.all((targets == 0) | (targets == 1)) and np.all(targets.sum(axis=1) == 1)):
        raise ValueError("targets must be one-hot rows")
    m = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    loss = -float((targets * log_probs).sum()) / m
    grad = (np.exp(log_probs) - targets) / m
    return loss, grad.astype(logits.dtype, copy=False)


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


class Module:
    def params(self) -> dict[str, Parameter]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x, train=False, rng=None):
        return self.forward(x, train, rng)

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise NoForwardCache(f"{type(self).__name__}.backward without a train-mode forward")
        self._cache = None
        return cache


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1,
                 rng=None, dtype=np.float32):
        self.stride = stride
        self.pad = kernel_size // 2
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        rng = make_rng(rng if rng is not None else 0)
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        self.weight = Parameter(w.astype(dtype), decay=True)
        self._cache = None

    def params(self):
        return {"weight": self.weight}

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x
        return conv2d(x, self.weight.data, self.stride, self.pad)

    def backward(self, dy):
        x = self._take_cache()
        dx, dw = conv2d_backward(dy, x, self.weight.data, self.stride, self.pad)
        self.weight.grad += dw
        return dx


class BatchNorm2d(Module):
    """Per-channel batch normalization; running stats use momentum 0.9."""

    def __init__(self, channels, dtype=np.float32, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False, rng=None):
        g = self.gamma.data[None, :, None, None]
        b = self.beta.data[None, :, None, None]
        if not train:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps).astype(x.dtype)
            return (x - self.running_mean[None, :, None, None]) * (g * inv_std[None, :, None, None]) + b
        if x.shape[0] < 2:
            raise ShapeError("batch norm in train mode needs a batch of at least 2")
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = xc * inv_std[None, :, None, None]
        mom = self.momentum
        self.running_mean[...] = mom * self.running_mean + (1 - mom) * mean
        self.running_var[...] = mom * self.running_var + (1 - mom) * var * (m / (m - 1))
        self._cache = (xhat, inv_std)
        return xhat * g + b

    def backward(self, dy):
        xhat, inv_std = self._take_cache()
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        dxhat = dy * self.gamma.data[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)


class ReLU(Module):
    def __init__(self):
        self._cache = None

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x
        return relu(x)

    def backward(self, dy):
        return relu_backward(dy, self._take_cache())


class Dropout(Module):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""

    def __init__(self, rate=0.5):
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._cache = None

    def forward(self, x, train=False, rng=None):
        if not train:
            return x
        if self.rate == 0:
            self._cache = x.dtype.type(1.0)
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = rng.random(x.shape) >= self.rate
        mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.rate))
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class GlobalMeanPool(Module):
    def __init__(self):
        self._cache = None

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x.shape
        return global_mean_pool(x)

    def backward(self, dy):
        return global_mean_pool_backward(dy, self._take_cache())


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        rng = make_rng(rng if rng is not None else 0)
        w = rng.standard_normal((out_features, in_features)) * np.sqrt(2.0 / in_features)
        self.weight = Parameter(w.astype(dtype), decay=True)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x
        return fully_connected(x, self.weight.data, self.bias.data)

    def backward(self, dy):
        x = self._take_cache()
        dx, dw, db = fully_connected_backward(dy, x, self.weight.data)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_input: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor_frac: float = 1e-3) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    The floor is ``floor_frac`` times the largest numeric gradient magnitude
    of the tensor, so entries that are tiny compared with the rest of the
    gradient are judged on an absolute scale.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    floor = max(floor_frac * float(np.abs(numeric).max(initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def numeric_gradient(loss_fn: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to ``x``, perturbed in place."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def grad_check(
    forward: Callable[..., np.ndarray],
    backward: Callable[[np.ndarray], Sequence[np.ndarray]],
    inputs: dict[str, np.ndarray],
    tolerance: float = 1e-6,
    h: float = 1e-5,
    seed: int = 0,
    reference: dict[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare an op's analytic gradients with central differences.

    ``forward(*inputs.values())`` returns the op output; ``backward(dout)``
    returns one gradient per input, in order.  The scalar probed is
    ``sum(output * R)`` for a fixed random ``R``.  Numeric gradients are
    taken on ``reference`` copies when given (e.g. float64 twins of float32
    inputs), otherwise on ``inputs`` themselves.
    """
    rng = make_rng(seed)
    out = forward(*inputs.values())
    proj = rng.standard_normal(np.shape(out))
    analytic = backward(proj.astype(np.asarray(out).dtype))
    if len(analytic) != len(inputs):
        raise ValueError("backward must return one gradient per input")

    ref = reference if reference is not None else inputs
    ref_vals = list(ref.values())

    def loss():
        return float((np.asarray(forward(*ref_vals), dtype=np.float64) * proj).sum())

    report = GradCheckReport(0.0, tolerance)
    for (name, x), a in zip(ref.items(), analytic):
        if a is None:
            continue
        num = numeric_gradient(loss, x, h)
        err = relative_error(a, num)
        report.per_input[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    return report

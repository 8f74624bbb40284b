"""Dense NCHW kernels with hand-written backward passes.

Every forward function returns ``(out, cache)`` and the matching backward
consumes ``(dout, cache)``. Kernels follow the dtype of their inputs, so the
same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NonFiniteError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _windows(xp, k, stride):
    # (N, C, Ho, Wo, k, k) strided view, no copy
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    return cols[:, :, ::stride, ::stride]


def _im2col(xp, k, stride, ho, wo):
    # cols[c, i, j, n, h, w] = xp[n, c, i + stride*h, j + stride*w]
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def conv2d_forward(x, w, stride=1, pad=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,k,k); no bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-d arrays, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if c != ci or k != k2:
        raise ConfigurationError(f"conv2d input channels {c} do not match weights {w.shape}")
    if stride < 1 or pad < 0:
        raise ConfigurationError("conv2d needs stride >= 1 and pad >= 0")
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ConfigurationError("conv2d kernel larger than padded input")
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, stride, ho, wo)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    return out, (x.shape, cols, w, stride, pad)


def conv2d_backward(dout, cache):
    x_shape, cols, w, stride, pad = cache
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    d2 = dout.transpose(1, 0, 2, 3).reshape(o, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    dcols = (w.reshape(o, -1).T @ d2).reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
    dx = dxp[:, :, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(dx), dw


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, train,
                      eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch norm over N,H,W.

    Returns ``(out, cache, (new_mean, new_var))``. In train mode the running
    statistics are blended as ``(1 - momentum) * old + momentum * batch`` with
    the unbiased batch variance; in eval mode they are returned unchanged.
    The inputs are never mutated.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"batchnorm has {gamma.shape[0]} channels, input has {c}")
    axes = (0, 2, 3)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = x.size // c
        unbiased = var * (m / max(m - 1, 1))
        new_stats = ((1 - momentum) * running_mean + momentum * mean,
                     (1 - momentum) * running_var + momentum * unbiased)
    else:
        mean, var = running_mean, running_var
        new_stats = (running_mean, running_var)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    out = out.astype(x.dtype, copy=False)
    return out, (xhat, inv_std, gamma, train), tuple(s.astype(running_mean.dtype) for s in new_stats)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    axes = (0, 2, 3)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    g = (gamma * inv_std)[None, :, None, None]
    if not train:
        return dout * g, dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = g / m * (m * dout - dbeta[None, :, None, None]
                  - xhat * dgamma[None, :, None, None])
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x):
    return dout * (x > 0)


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(
        np.result_type(x, np.float32), copy=False)


def sigmoid_forward(x):
    s = sigmoid(x)
    return s, s


def sigmoid_backward(dout, s):
    return dout * s * (1 - s)


def softmax(v, axis=-1):
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_forward(v, axis=-1):
    s = softmax(v, axis)
    return s, (s, axis)


def softmax_backward(dout, cache):
    s, axis = cache
    return s * (dout - (dout * s).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2d_forward(x, k=2, stride=None):
    """Max pooling; ties go to the first window position in row-major order."""
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ConfigurationError(f"pool window {k} larger than input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = x[:, :, 0:stride * ho:stride, 0:stride * wo:stride].copy()
    idx = np.zeros(out.shape, dtype=np.int8 if k * k < 128 else np.int32)
    for t in range(1, k * k):
        i, j = divmod(t, k)
        cand = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        better = cand > out  # strict: earlier positions win ties
        np.copyto(out, cand, where=better)
        np.copyto(idx, t, where=better)
    return out, (x.shape, idx, k, stride)


def maxpool2d_backward(dout, cache):
    x_shape, idx, k, stride = cache
    ho, wo = idx.shape[2], idx.shape[3]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for t in range(k * k):
        i, j = divmod(t, k)
        dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dout * (idx == t)
    return dx


def global_max_pool_forward(x):
    """(N,C,H,W) -> (N,C) channel maxima; first maximal position wins."""
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def global_max_pool_backward(dout, cache):
    shape, idx = cache
    n, c = shape[:2]
    dx = np.zeros((n, c, int(np.prod(shape[2:]))), dtype=dout.dtype)
    np.put_along_axis(dx, idx[..., None], dout[..., None], axis=-1)
    return dx.reshape(shape)


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout, shape):
    hw = shape[2] * shape[3]
    return np.broadcast_to((dout / hw)[:, :, None, None], shape).astype(dout.dtype)


# ---------------------------------------------------------------------------
# dense layers and losses
# ---------------------------------------------------------------------------

def linear_forward(x, w, b):
    """``x`` (N, c_in), ``w`` (c_out, c_in), ``b`` (c_out,)."""
    if x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ConfigurationError(f"linear shapes disagree: x{x.shape} w{w.shape} b{b.shape}")
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy_with_logits(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ConfigurationError(f"labels must be {n} ints in [0, {c})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(param, grad, velocity, lr, momentum=0.9, weight_decay=5e-4):
    """Heavy-ball SGD with decay folded into the buffer: v = mu*v + g + wd*w."""
    v = momentum * velocity + grad + weight_decay * param
    return (param - lr * v).astype(param.dtype), v.astype(param.dtype)


@dataclass
class SGD:
    """Momentum SGD over a dict of named parameters."""

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        for name in sorted(grads):
            p = params[name]
            g = grads[name]
            if g.shape != p.shape:
                raise ConfigurationError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            params[name], self.velocity[name] = sgd_step(
                p, g, v, lr, self.momentum, self.weight_decay)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def numerical_gradient(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric):
    """Largest elementwise deviation, scaled by the gradient's magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def finite_difference_check(f, inputs, analytic, eps=1e-5):
    """Max relative error between ``analytic`` grads and central differences.

    ``inputs`` and ``analytic`` are sequences of float64 arrays; ``f`` evaluates
    the scalar objective reading the (in-place perturbed) ``inputs``.
    """
    worst = 0.0
    for x, g in zip(inputs, analytic):
        worst = max(worst, relative_error(g, numerical_gradient(f, x, eps)))
    return worst

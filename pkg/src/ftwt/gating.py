"""Decision heads: GMP -> softmax -> 1x1 conv (a linear map) -> mask logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError


@dataclass
class GatingHead:
    """Predicts the ``c_out`` filter mask of a block from its ``c_in``-channel input."""

    weight: np.ndarray  # (c_out, c_in)
    bias: np.ndarray  # (c_out,)
    use_softmax: bool = True

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def macs(self):
        return self.in_channels * self.out_channels

    def copy(self):
        return GatingHead(self.weight.copy(), self.bias.copy(), self.use_softmax)


def init_head(c_in, c_out, use_softmax=True):
    # zero init: every logit starts at the keep tie, so training starts dense
    return GatingHead(np.zeros((c_out, c_in), np.float32), np.zeros(c_out, np.float32), use_softmax)


def build_heads(arch, use_softmax=True):
    return {b: init_head(arch.channels(b - 1), arch.channels(b), use_softmax)
            for b in arch.gated_blocks}


def head_forward(x, head):
    """Logits ``P`` (N, c_out) from the block input ``x`` (N, c_in, H, W)."""
    if x.shape[1] != head.in_channels:
        raise ConfigurationError(
            f"head expects {head.in_channels} input channels, got {x.shape[1]}")
    e, gmp_cache = ops.global_max_pool_forward(x)
    if head.use_softmax:
        s, sm_cache = ops.softmax_forward(e, axis=1)
    else:
        s, sm_cache = e, None
    p, lin_cache = ops.linear_forward(s, head.weight, head.bias)
    return p, (gmp_cache, sm_cache, lin_cache)


def head_backward(dp, cache, input_grad=False):
    """Grads ``(dW, db, dI)`` for upstream ``dp`` w.r.t. the logits.

    Under the straight-through rule the gradient w.r.t. the binary mask is
    passed here unchanged as ``dp``. ``dI`` is None unless ``input_grad``.
    """
    if cache is None:
        raise ConfigurationError("head_backward called without a forward cache")
    gmp_cache, sm_cache, lin_cache = cache
    ds, dw, db = ops.linear_backward(dp, lin_cache)
    if not input_grad:
        return dw, db, None
    de = ops.softmax_backward(ds, sm_cache) if sm_cache is not None else ds
    return dw, db, ops.global_max_pool_backward(de, gmp_cache)


def binarize(logits):
    """round(sigmoid(P)) with the tie at 0.5 kept: 1 where P >= 0."""
    return (np.asarray(logits) >= 0).astype(np.float32)


def bce_with_logits(logits, targets, reduction="mean"):
    """Per-filter binary cross-entropy on logits and its gradient.

    ``reduction="mean"`` averages over filters (and samples); ``"sum"`` sums
    over filters and averages over samples.
    """
    p = np.asarray(logits, dtype=np.float64)
    g = np.asarray(targets, dtype=np.float64)
    if p.shape != g.shape:
        raise ConfigurationError(f"logits {p.shape} and targets {g.shape} differ in shape")
    # softplus(p) - g*p == -(g log s + (1-g) log(1-s))
    loss = np.maximum(p, 0) - g * p + np.log1p(np.exp(-np.abs(p)))
    grad = ops.sigmoid(p) - g
    if p.ndim == 1:
        p = p[None]
    n, c = p.shape
    if reduction == "mean":
        denom = n * c
    elif reduction == "sum":
        denom = n
    else:
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    return float(loss.sum() / denom), (grad / denom).astype(np.asarray(logits).dtype)


def predicted_mask_fn(heads):
    """A ``mask_fn`` for :func:`ftwt.network.forward` that applies head masks."""
    def fn(b, inp, out):
        head = heads.get(b)
        if head is None:
            return None
        p, _ = head_forward(inp, head)
        return binarize(p)
    return fn

"""Self-supervised ground-truth masks from block activations.

The heatmap-mass rule: take each channel's peak absolute response, normalise
to unit mass, sort descending and keep the channels whose running mass has
not yet exceeded ``r``. Everything here is computed without gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError
from .network import forward

# comparisons against r * total are widened by this relative slack so that
# mass landing exactly on r is treated as not exceeding it; activations are
# float32, so the slack has to cover their rounding (about 6e-8 per value)
MASS_RTOL = 1e-6


@dataclass(frozen=True)
class MassCriterion:
    r: float
    inclusive_crossing: bool = False
    zero_eps: float = 0.0

    def __post_init__(self):
        if not 0 < self.r <= 1:
            raise ConfigurationError(f"mass ratio r must lie in (0, 1], got {self.r}")
        if self.zero_eps < 0:
            raise ConfigurationError("zero_eps must be >= 0")


@dataclass(frozen=True)
class Signature:
    """Fixed kept-filter count per gated block."""

    counts: dict  # block -> k

    @classmethod
    def from_list(cls, counts, arch):
        gated = arch.gated_blocks
        if len(counts) != len(gated):
            raise ConfigurationError(
                f"signature has {len(counts)} entries for {len(gated)} gated blocks")
        out = {}
        for b, k in zip(gated, counts):
            if not isinstance(k, int) or not 1 <= k <= arch.channels(b):
                raise ConfigurationError(f"signature count {k!r} out of range for block {b}")
            out[b] = k
        return cls(out)


def load_signature(path, arch):
    try:
        with open(path) as f:
            counts = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(counts, list):
        raise FormatError(f"{path}: signature must be a JSON array of counts")
    return Signature.from_list(counts, arch)


def channel_activations(out):
    """GMP(|O|): (N, C, H, W) -> (N, C), or (C, H, W) -> (C,)."""
    a = np.abs(np.asarray(out))
    return a.reshape(*a.shape[:-2], -1).max(axis=-1)


def mass_masks(acts, criterion):
    """Heatmap-mass masks for a batch of activation vectors (N, C) or (C,)."""
    acts = np.asarray(acts, dtype=np.float64)
    single = acts.ndim == 1
    a = acts[None] if single else acts
    total = a.sum(axis=1, keepdims=True)
    if criterion.r == 1.0:
        mask = a > criterion.zero_eps
    else:
        order = np.argsort(-a, axis=1, kind="stable")
        sorted_a = np.take_along_axis(a, order, axis=1)
        cum = np.cumsum(sorted_a, axis=1)
        limit = criterion.r * total * (1 + MASS_RTOL)
        if criterion.inclusive_crossing:
            keep_sorted = (cum - sorted_a) <= limit
        else:
            keep_sorted = cum <= limit
        mask = np.zeros_like(keep_sorted)
        np.put_along_axis(mask, order, keep_sorted, axis=1)
    mask = np.where(total > 0, mask, False).astype(np.float32)
    return mask[0] if single else mask


def heatmap_mass_mask(out, criterion):
    """Ground-truth mask for one sample's output maps ``O`` (C, H, W)."""
    return mass_masks(channel_activations(out), criterion)


def topk_masks(acts, k):
    acts = np.asarray(acts, dtype=np.float64)
    single = acts.ndim == 1
    a = acts[None] if single else acts
    c = a.shape[1]
    if not 1 <= k <= c:
        raise ConfigurationError(f"k={k} out of range for {c} channels")
    order = np.argsort(-a, axis=1, kind="stable")[:, :k]
    mask = np.zeros(a.shape, np.float32)
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask[0] if single else mask


def topk_mask(out, k):
    """Keep the ``k`` channels of ``O`` (C, H, W) with the largest GMP(|O|)."""
    return topk_masks(channel_activations(out), k)


def masks_from_outputs(out, block, rule):
    """Dispatch on a :class:`MassCriterion` or :class:`Signature`."""
    acts = channel_activations(out)
    if isinstance(rule, Signature):
        return topk_masks(acts, rule.counts[block])
    return mass_masks(acts, rule)


@dataclass
class MaskBatch:
    gt: dict = field(default_factory=dict)  # block -> (N, c) ground truth
    pred: dict = field(default_factory=dict)  # block -> (N, c) predicted

    def kept(self, which="gt"):
        return {b: m.sum(axis=1) for b, m in getattr(self, which).items()}


def gt_mask_fn(rule, gated_blocks, sink=None):
    """``mask_fn`` that applies ground-truth masks and optionally records them."""
    gated = set(gated_blocks)

    def fn(b, inp, out):
        if b not in gated:
            return None
        m = masks_from_outputs(out, b, rule)
        if sink is not None:
            sink[b] = m
        return m
    return fn


def generate_gt_masks(net, x, rule, cascaded=True, train=False, batch_size=256):
    """Ground-truth masks for every gated block of ``net`` on batch ``x``.

    Cascaded: block ``b``'s mask is derived from ``O^b`` computed on the
    already-masked input and applied before block ``b+1``. Un-cascaded: all
    masks come from a single fully dense forward.
    """
    gated = net.arch.gated_blocks
    chunks = {b: [] for b in gated}
    for s in range(0, max(len(x), 1), batch_size):
        xb = x[s:s + batch_size]
        if len(xb) == 0:
            break
        if cascaded:
            sink = {}
            forward(net, xb, mask_fn=gt_mask_fn(rule, gated, sink), train=train)
        else:
            res = forward(net, xb, train=train)
            sink = {b: masks_from_outputs(res.outputs[b], b, rule) for b in gated}
        for b in gated:
            chunks[b].append(sink[b])
    return MaskBatch(gt={b: np.concatenate(v) if v else np.zeros((0, net.arch.channels(b)), np.float32)
                         for b, v in chunks.items()})


generate_gt_masks_cascaded = generate_gt_masks

"""MAC accounting, sliced dynamic inference and the single-thread benchmark.

All costs are multiply-accumulates (MACs). Pooling, folded BN, softmax and
elementwise work are not counted. Reduction percentages compare
``dynamic + head`` MACs against the dense network's MACs.
"""

from __future__ import annotations

import math
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import ops
from .errors import BenchmarkError, ConfigurationError, DataError
from .gating import predicted_mask_fn
from .network import classifier_dims, forward
from .supervision import generate_gt_masks


def conv_macs(h_out, w_out, k, c_in, c_out):
    return h_out * w_out * k * k * c_in * c_out


def dense_macs(arch):
    """Per-layer MACs of the dense network plus per-head overhead."""
    layers = {}
    for b, sh in enumerate(arch.block_shapes(), start=1):
        k = arch.blocks[b - 1].kernel
        layers[f"conv.{b}"] = conv_macs(*sh.out_hw, k, sh.in_channels, sh.out_channels)
    for i, (cin, cout) in enumerate(classifier_dims(arch), start=1):
        layers[f"fc.{i}"] = cin * cout
    heads = {b: arch.channels(b - 1) * arch.channels(b) for b in arch.gated_blocks}
    return {"layers": layers, "heads": heads, "total": sum(layers.values())}


def dynamic_macs(arch, masks):
    """Per-sample MACs per layer given kept-filter masks ``{block: (N, c)}``.

    A block's cost uses its kept output filters and the kept filters of the
    block feeding it; unmasked blocks count in full.
    """
    n = len(next(iter(masks.values()))) if masks else 1
    out = {}
    for b, sh in enumerate(arch.block_shapes(), start=1):
        k = arch.blocks[b - 1].kernel
        c_in = masks[b - 1].sum(axis=1) if (b - 1) in masks else np.full(n, sh.in_channels)
        c_out = masks[b].sum(axis=1) if b in masks else np.full(n, sh.out_channels)
        out[f"conv.{b}"] = conv_macs(*sh.out_hw, k, 1, 1) * c_in.astype(np.int64) * c_out.astype(np.int64)
    for i, (cin, cout) in enumerate(classifier_dims(arch), start=1):
        out[f"fc.{i}"] = np.full(n, cin * cout, dtype=np.int64)
    return out


@dataclass
class FlopsReport:
    dense: dict  # layer -> MACs
    dynamic: dict  # layer -> mean MACs per sample
    head_macs: int  # per sample, all heads
    samples: int
    label: str = ""

    @property
    def dense_total(self):
        return sum(self.dense.values())

    @property
    def dynamic_total(self):
        return sum(self.dynamic.values())

    @property
    def reduction(self):
        """Percent of dense MACs saved, head overhead included."""
        return 100.0 * (1.0 - (self.dynamic_total + self.head_macs) / self.dense_total)

    @classmethod
    def from_masks(cls, arch, masks, label=""):
        if masks and len(next(iter(masks.values()))) == 0:
            raise DataError("cannot account FLOPs over an empty dataset")
        dense = dense_macs(arch)
        dyn = dynamic_macs(arch, masks)
        head = sum(dense["heads"][b] for b in masks) if masks else 0
        n = len(next(iter(dyn.values())))
        return cls(dense["layers"], {k: float(v.mean()) for k, v in dyn.items()}, head, n, label)

    def to_dict(self):
        return {
            "label": self.label,
            "unit": "MACs",
            "samples": self.samples,
            "layers": [{"layer": k, "dense_macs": self.dense[k], "dynamic_macs": self.dynamic[k]}
                       for k in self.dense],
            "head_macs": self.head_macs,
            "dense_total": self.dense_total,
            "dynamic_total": self.dynamic_total,
            "reduction_percent": self.reduction,
        }

    def to_table(self):
        lines = [f"{'layer':<8} {'dense MACs':>14} {'dynamic MACs':>16} {'kept %':>8}"]
        for k in self.dense:
            frac = 100.0 * self.dynamic[k] / self.dense[k]
            lines.append(f"{k:<8} {self.dense[k]:>14,d} {self.dynamic[k]:>16,.1f} {frac:>8.2f}")
        lines.append(f"{'heads':<8} {'':>14} {self.head_macs:>16,d}")
        lines.append(f"{'total':<8} {self.dense_total:>14,d} {self.dynamic_total + self.head_macs:>16,.1f}"
                     f"  reduction {self.reduction:.2f}%")
        return "\n".join(lines)


def estimate_reduction_pretraining(net, x, rule, cascaded=True, batch_size=256):
    """One-shot estimate: ground-truth masks on the frozen dense network."""
    if len(x) == 0:
        raise DataError("cannot estimate FLOPs over an empty dataset")
    masks = generate_gt_masks(net, x, rule, cascaded=cascaded, batch_size=batch_size).gt
    return FlopsReport.from_masks(net.arch, masks, label="estimate")


def predicted_masks(net, heads, x, batch_size=256):
    chunks = {b: [] for b in heads}
    for s in range(0, len(x), batch_size):
        res = forward(net, x[s:s + batch_size], mask_fn=predicted_mask_fn(heads))
        for b in heads:
            chunks[b].append(res.masks[b])
    return {b: np.concatenate(v) for b, v in chunks.items()}


def measured_flops_post_training(net, heads, x, batch_size=256):
    """Same accounting as the estimate, but with the heads' predicted masks."""
    if len(x) == 0:
        raise DataError("cannot account FLOPs over an empty dataset")
    return FlopsReport.from_masks(net.arch, predicted_masks(net, heads, x, batch_size), label="measured")


# ---------------------------------------------------------------------------
# sliced inference
# ---------------------------------------------------------------------------

@dataclass
class SlicedResult:
    logits: np.ndarray  # (num_classes,)
    executed_macs: dict  # layer -> MACs actually multiplied
    kept: dict  # block -> kept filter indices
    head_macs: int = 0


@dataclass(frozen=True)
class SlicedHead:
    """A gating head rearranged for single-image inference.

    With softmax, ``W softmax(e) + b`` has the sign of ``(W + b 1^T) exp(e - max e)``
    because the softmax denominator is positive, so the bias is folded into
    the matrix once and the normalisation is skipped.
    """

    matrix: np.ndarray  # (c_out, c_in)
    bias: np.ndarray | None  # only without softmax
    use_softmax: bool
    macs: int

    def keep(self, e):
        if self.use_softmax:
            e = np.exp(e - e.max())
            return np.flatnonzero(self.matrix @ e >= 0)
        return np.flatnonzero(self.matrix @ e + self.bias >= 0)


def prepare_heads(heads):
    out = {}
    for b, h in (heads or {}).items():
        if isinstance(h, SlicedHead):
            out[b] = h
        elif h.use_softmax:
            out[b] = SlicedHead((h.weight + h.bias[:, None]).astype(np.float32), None, True, h.macs)
        else:
            out[b] = SlicedHead(h.weight, h.bias, False, h.macs)
    return out


@lru_cache(maxsize=None)
def _cols_index(h, w, k, stride, pad):
    # flat offsets into a padded (h + 2p) x (w + 2p) plane, ordered (ki, kj, ho, wo)
    wp = w + 2 * pad
    ho = ops.conv_output_size(h, k, stride, pad)
    wo = ops.conv_output_size(w, k, stride, pad)
    corner = (np.arange(ho) * stride)[:, None] * wp + (np.arange(wo) * stride)[None, :]
    offs = (np.arange(k)[:, None] * wp + np.arange(k)[None, :]).ravel()
    return (offs[:, None] + corner.ravel()[None, :]).ravel(), ho, wo


def _conv_compact(a, w, bias, stride, pad):
    """Single-image conv + bias on compact (c, h, w) activations; returns (out, MACs)."""
    c, h, wd = a.shape
    o, _, k, _ = w.shape
    idx, ho, wo = _cols_index(h, wd, k, stride, pad)
    if o == 0:
        return np.zeros((0, ho, wo), np.float32), 0
    if c == 0:
        return np.broadcast_to(bias[:, None, None], (o, ho, wo)).astype(np.float32), 0
    if pad:
        xp = np.zeros((c, h + 2 * pad, wd + 2 * pad), a.dtype)
        xp[:, pad:pad + h, pad:pad + wd] = a
    else:
        xp = a
    cols = xp.reshape(c, -1).take(idx, axis=1).reshape(c * k * k, ho * wo)
    out = w.reshape(o, -1) @ cols
    out += bias[:, None]
    return out.reshape(o, ho, wo), o * c * k * k * ho * wo


def _pool2_compact(a):
    # non-overlapping 2x2 max; equal to the training-time pool in value
    h2, w2 = a.shape[1] // 2 * 2, a.shape[2] // 2 * 2
    top = np.maximum(a[:, 0:h2:2, 0:w2:2], a[:, 0:h2:2, 1:w2:2])
    bottom = np.maximum(a[:, 1:h2:2, 0:w2:2], a[:, 1:h2:2, 1:w2:2])
    return np.maximum(top, bottom, out=top)


def sliced_inference(net, heads, x, masks=None):
    """Run one image through a BN-folded network computing only kept filters.

    Activations stay compact (kept channels only); each gated block gathers
    the kernel slice for its kept inputs x kept outputs. ``masks`` (block ->
    binary (c,)) overrides the heads where given. ``heads`` may be raw
    :class:`GatingHead` objects or the output of :func:`prepare_heads`.
    """
    if not net.folded:
        raise ConfigurationError("sliced inference needs a BN-folded network")
    heads = prepare_heads(heads)
    masks = masks or {}
    a = np.asarray(x, np.float32)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ConfigurationError("sliced inference runs one image at a time")
        a = a[0]
    arch = net.arch
    kept_in = None  # None: every channel of the previous block is present
    executed, kept, head_total = {}, {}, 0
    for b, spec in enumerate(arch.blocks, start=1):
        c_in, c_out = arch.channels(b - 1), arch.channels(b)
        if b in masks:
            kept_out = np.flatnonzero(np.asarray(masks[b]) > 0)
        elif b in heads:
            head = heads[b]
            if kept_in is None:
                e = a.reshape(c_in, -1).max(axis=1)
            else:
                e = np.zeros(c_in, np.float32)
                if len(kept_in):
                    e[kept_in] = a.reshape(len(kept_in), -1).max(axis=1)
            kept_out = head.keep(e)
            head_total += head.macs
        else:
            kept_out = None
        w = net.params[f"conv.{b}.weight"]
        bias = net.params[f"conv.{b}.bias"]
        if kept_out is not None:
            w = w.take(kept_out, axis=0)  # gather copies
            bias = bias.take(kept_out)
            kept[b] = kept_out
        if kept_in is not None:
            w = w.take(kept_in, axis=1)
        a, macs = _conv_compact(a, w, bias, spec.stride, spec.pad)
        executed[f"conv.{b}"] = macs
        np.maximum(a, 0, out=a)
        if spec.pool == "max2":
            a = _pool2_compact(a)
        kept_in = kept_out
    c_last = arch.channels(arch.num_blocks)
    if kept_in is None:
        feat = a.reshape(c_last, -1).mean(axis=1)
    else:
        feat = np.zeros(c_last, np.float32)
        if len(kept_in):
            feat[kept_in] = a.reshape(len(kept_in), -1).mean(axis=1)
    layers = classifier_dims(arch)
    for i in range(1, len(layers) + 1):
        w = net.params[f"fc.{i}.weight"]
        feat = w @ feat + net.params[f"fc.{i}.bias"]
        executed[f"fc.{i}"] = w.size
        if i < len(layers):
            feat = np.maximum(feat, 0)
    return SlicedResult(feat, executed, kept, head_total)


def executed_flops_report(results, arch, label="sliced"):
    dense = dense_macs(arch)["layers"]
    dyn = {k: float(np.mean([r.executed_macs[k] for r in results])) for k in dense}
    heads = int(round(np.mean([r.head_macs for r in results]))) if results else 0
    return FlopsReport(dense, dyn, heads, len(results), label)


# ---------------------------------------------------------------------------
# latency benchmark
# ---------------------------------------------------------------------------

MIN_TIMED_NS = 100_000


@contextmanager
def single_thread():
    """Pin every BLAS/OpenMP pool to one thread, or refuse."""
    with threadpool_limits(limits=1):
        info = threadpool_info()
        bad = [p for p in info if p.get("num_threads") != 1]
        if bad:
            raise BenchmarkError(f"could not pin thread pools to 1 thread: {bad}")
        yield


@dataclass
class LatencyReport:
    dense_ms: float
    dynamic_ms: float
    repetitions: int
    warmup: int
    inner_loops: int
    images: int
    threads: int = 1
    flops_reduction: float = float("nan")
    label: str = ""
    dense_samples_ms: list = field(default_factory=list, repr=False)
    dynamic_samples_ms: list = field(default_factory=list, repr=False)

    @property
    def latency_reduction(self):
        return 100.0 * (1.0 - self.dynamic_ms / self.dense_ms)

    @property
    def speedup(self):
        return self.dense_ms / self.dynamic_ms

    def to_dict(self):
        return {
            "machine_label": self.label,
            "threads": self.threads,
            "batch_size": 1,
            "images": self.images,
            "repetitions": self.repetitions,
            "warmup": self.warmup,
            "inner_loops": self.inner_loops,
            "dense_median_ms": self.dense_ms,
            "dynamic_median_ms": self.dynamic_ms,
            "speedup": self.speedup,
            "latency_reduction_percent": self.latency_reduction,
            "flops_reduction_percent": self.flops_reduction,
        }

    def to_table(self):
        return "\n".join([
            f"machine: {self.label or '(unlabelled)'}  threads={self.threads} batch=1",
            f"dense   median {self.dense_ms:8.4f} ms/image",
            f"dynamic median {self.dynamic_ms:8.4f} ms/image",
            f"speedup {self.speedup:.3f}x  latency reduction {self.latency_reduction:.2f}%"
            f"  FLOPs reduction {self.flops_reduction:.2f}%",
        ])


def _time_pass(fn, images, inner):
    total = 0
    for img in images:
        t0 = time.perf_counter_ns()
        for _ in range(inner):
            fn(img)
        total += time.perf_counter_ns() - t0
    return total / (inner * len(images)) / 1e6


def latency_benchmark(dense_net, dyn_net, heads, inputs, reps=30, warmup=5, label=""):
    """Median per-image latency of dense vs sliced dynamic inference, batch 1.

    Both nets must be BN-folded. Dense and dynamic passes alternate within
    each repetition so drift affects both equally.
    """
    if reps < 30 or warmup < 5:
        raise BenchmarkError("need at least 30 timed repetitions and 5 warmups")
    if len(inputs) == 0:
        raise DataError("benchmark needs at least one input image")
    images = [np.ascontiguousarray(img) for img in inputs]

    def dense_fn(img):
        return sliced_inference(dense_net, None, img)

    prepared = prepare_heads(heads)  # like BN folding, done once before timing

    def dyn_fn(img):
        return sliced_inference(dyn_net, prepared, img)

    with single_thread():
        for _ in range(warmup):
            _time_pass(dense_fn, images, 1)
            _time_pass(dyn_fn, images, 1)
        one = min(_time_pass(dense_fn, images, 1), _time_pass(dyn_fn, images, 1)) * 1e6
        inner = max(1, math.ceil(MIN_TIMED_NS / max(one, 1.0)))
        dense_t, dyn_t = [], []
        for _ in range(reps):
            dense_t.append(_time_pass(dense_fn, images, inner))
            dyn_t.append(_time_pass(dyn_fn, images, inner))
    results = [sliced_inference(dyn_net, heads, img) for img in images]
    flops = executed_flops_report(results, dyn_net.arch).reduction
    return LatencyReport(statistics.median(dense_t), statistics.median(dyn_t), reps, warmup,
                         inner, len(images), 1, flops, label, dense_t, dyn_t)

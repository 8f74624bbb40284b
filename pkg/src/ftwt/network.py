"""Plain conv-BN-ReLU stacks with per-block channel masking.

Blocks are numbered from 1. Block ``b`` reads ``I^b`` (the pooled, masked
output of block ``b-1``), computes ``O^b = relu(bn(conv(I^b)))`` and, when a
mask ``M^b`` is supplied, passes ``O^b * M^b`` on. Masking happens before
pooling; the two commute for binary channel masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigurationError


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    pool: str = "none"  # "none" | "max2"

    def __post_init__(self):
        if self.pool not in ("none", "max2"):
            raise ConfigurationError(f"unknown pool {self.pool!r}")
        if self.out_channels < 1 or self.kernel < 1 or self.stride < 1 or self.pad < 0:
            raise ConfigurationError(f"invalid block {self}")


@dataclass(frozen=True)
class BlockShape:
    in_channels: int
    in_hw: tuple
    out_channels: int
    out_hw: tuple  # conv output, before pooling
    next_hw: tuple  # after pooling


@dataclass(frozen=True)
class Architecture:
    name: str
    input_shape: tuple
    blocks: tuple
    num_classes: int = 10
    hidden: tuple = ()
    gate_from_block: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if not self.blocks:
            raise ConfigurationError("architecture needs at least one conv block")
        if self.gate_from_block < 2:
            raise ConfigurationError("the first block is never gated (gate_from_block >= 2)")
        self.block_shapes()  # validates spatial sizes

    @property
    def num_blocks(self):
        return len(self.blocks)

    @property
    def gated_blocks(self):
        return [b for b in range(1, self.num_blocks + 1) if b >= self.gate_from_block]

    def channels(self, block):
        """Output channels of ``block``; block 0 means the image."""
        return self.input_shape[0] if block == 0 else self.blocks[block - 1].out_channels

    def block_shapes(self):
        shapes = []
        c, h, w = self.input_shape
        for i, spec in enumerate(self.blocks, start=1):
            ho = ops.conv_output_size(h, spec.kernel, spec.stride, spec.pad)
            wo = ops.conv_output_size(w, spec.kernel, spec.stride, spec.pad)
            if ho < 1 or wo < 1:
                raise ConfigurationError(f"block {i} produces an empty map")
            hn, wn = (ho // 2, wo // 2) if spec.pool == "max2" else (ho, wo)
            if hn < 1 or wn < 1:
                raise ConfigurationError(f"block {i} pooling empties the map")
            shapes.append(BlockShape(c, (h, w), spec.out_channels, (ho, wo), (hn, wn)))
            c, h, w = spec.out_channels, hn, wn
        return shapes

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "blocks": [vars(b).copy() for b in self.blocks],
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "gate_from_block": self.gate_from_block,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(name=d["name"], input_shape=tuple(d["input_shape"]),
                   blocks=tuple(BlockSpec(**b) for b in d["blocks"]),
                   num_classes=d["num_classes"], hidden=tuple(d["hidden"]),
                   gate_from_block=d["gate_from_block"])


def mnist_net():
    return Architecture(
        name="mnist_net",
        input_shape=(1, 28, 28),
        blocks=(BlockSpec(16, pool="max2"), BlockSpec(32, pool="max2"),
                BlockSpec(64, pool="max2"), BlockSpec(64)),
    )


def cifar_vgg_s():
    return Architecture(
        name="cifar_vgg_s",
        input_shape=(3, 32, 32),
        blocks=(BlockSpec(32, pool="max2"), BlockSpec(64, pool="max2"),
                BlockSpec(128), BlockSpec(128, pool="max2"), BlockSpec(256)),
    )


ARCHITECTURES = {"mnist_net": mnist_net, "cifar_vgg_s": cifar_vgg_s}


def get_architecture(name):
    try:
        return ARCHITECTURES[name]()
    except KeyError:
        raise ConfigurationError(f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}") from None


@dataclass
class Network:
    arch: Architecture
    params: dict
    folded: bool = False

    def copy(self):
        return Network(self.arch, {k: v.copy() for k, v in self.params.items()}, self.folded)

    def trainable_names(self):
        return sorted(k for k in self.params if not k.endswith(("running_mean", "running_var")))

    def num_conv_params(self):
        return sum(self.params[f"conv.{b}.weight"].size for b in range(1, self.arch.num_blocks + 1))


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def classifier_dims(arch):
    dims = [arch.channels(arch.num_blocks), *arch.hidden, arch.num_classes]
    return list(zip(dims[:-1], dims[1:]))


def build_network(arch, seed):
    """Fresh network: Kaiming-uniform conv/linear weights, identity BN."""
    rng = np.random.default_rng(seed)
    params = {}
    for b, sh in enumerate(arch.block_shapes(), start=1):
        k = arch.blocks[b - 1].kernel
        params[f"conv.{b}.weight"] = kaiming_uniform(
            rng, (sh.out_channels, sh.in_channels, k, k), sh.in_channels * k * k)
        params[f"bn.{b}.gamma"] = np.ones(sh.out_channels, np.float32)
        params[f"bn.{b}.beta"] = np.zeros(sh.out_channels, np.float32)
        params[f"bn.{b}.running_mean"] = np.zeros(sh.out_channels, np.float32)
        params[f"bn.{b}.running_var"] = np.ones(sh.out_channels, np.float32)
    for i, (cin, cout) in enumerate(classifier_dims(arch), start=1):
        params[f"fc.{i}.weight"] = kaiming_uniform(rng, (cout, cin), cin)
        params[f"fc.{i}.bias"] = np.zeros(cout, np.float32)
    return Network(arch, params)


def check_params(net):
    expected = build_network(net.arch, 0) if not net.folded else fold_batchnorm(build_network(net.arch, 0))
    for name, p in expected.params.items():
        if name not in net.params:
            raise ConfigurationError(f"missing parameter {name}")
        if net.params[name].shape != p.shape:
            raise ConfigurationError(f"parameter {name} has shape {net.params[name].shape}, expected {p.shape}")
    extra = set(net.params) - set(expected.params)
    if extra:
        raise ConfigurationError(f"unexpected parameters {sorted(extra)}")


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: np.ndarray
    inputs: dict  # block -> I^b
    outputs: dict  # block -> O^b, before masking
    masks: dict  # block -> (N, c) mask actually applied
    running_stats: dict = field(default_factory=dict)  # name -> new value (train mode)
    caches: dict = field(default_factory=dict)


def _as_mask(mask, n, c, block, dtype):
    m = np.asarray(mask, dtype=dtype)
    if m.ndim == 1:
        m = np.broadcast_to(m, (n, m.shape[0]))
    if m.shape != (n, c):
        raise ConfigurationError(f"mask for block {block} has shape {m.shape}, expected ({n}, {c})")
    return m


def forward(net, x, masks=None, mask_fn=None, train=False, keep_cache=False):
    """Run the network and collect per-block inputs and outputs.

    ``masks`` maps block -> binary vector (c,) or matrix (N, c). ``mask_fn(b,
    I, O)`` is called after each block's output is computed and may return a
    mask for that block (or None); it overrides ``masks`` where it answers.
    """
    arch = net.arch
    if tuple(x.shape[1:]) != arch.input_shape:
        raise ConfigurationError(f"batch shape {x.shape[1:]} does not match input {arch.input_shape}")
    if net.folded and train:
        raise ConfigurationError("a folded network cannot be trained")
    masks = masks or {}
    res = ForwardResult(None, {}, {}, {})
    n = x.shape[0]
    h = x
    for b, spec in enumerate(arch.blocks, start=1):
        res.inputs[b] = h
        z, conv_cache = ops.conv2d_forward(h, net.params[f"conv.{b}.weight"], spec.stride, spec.pad)
        if net.folded:
            z = z + net.params[f"conv.{b}.bias"][None, :, None, None]
            bn_cache = None
        else:
            z, bn_cache, (rm, rv) = ops.batchnorm_forward(
                z, net.params[f"bn.{b}.gamma"], net.params[f"bn.{b}.beta"],
                net.params[f"bn.{b}.running_mean"], net.params[f"bn.{b}.running_var"], train)
            if train:
                res.running_stats[f"bn.{b}.running_mean"] = rm
                res.running_stats[f"bn.{b}.running_var"] = rv
        o, relu_cache = ops.relu_forward(z)
        ops.check_finite(o, f"block {b} output")
        res.outputs[b] = o
        mask = mask_fn(b, h, o) if mask_fn is not None else None
        if mask is None:
            mask = masks.get(b)
        if mask is not None:
            mask = _as_mask(mask, n, o.shape[1], b, o.dtype)
            res.masks[b] = mask
            h = o * mask[:, :, None, None]
        else:
            h = o
        pool_cache = None
        if spec.pool == "max2":
            h, pool_cache = ops.maxpool2d_forward(h, 2)
        if keep_cache:
            res.caches[b] = (conv_cache, bn_cache, relu_cache, pool_cache)
    feat, gap_shape = ops.global_avg_pool_forward(h)
    fc_caches = []
    layers = classifier_dims(arch)
    for i in range(1, len(layers) + 1):
        feat, cache = ops.linear_forward(feat, net.params[f"fc.{i}.weight"], net.params[f"fc.{i}.bias"])
        relu_cache = None
        if i < len(layers):
            feat, relu_cache = ops.relu_forward(feat)
        fc_caches.append((cache, relu_cache))
    res.logits = ops.check_finite(feat, "logits")
    if keep_cache:
        res.caches["gap"] = gap_shape
        res.caches["fc"] = fc_caches
    return res


def backward(net, res, dlogits, mask_grad_hook=None):
    """Gradients of the loss w.r.t. every trainable parameter.

    Masks are constants here. ``mask_grad_hook(b, dM)`` receives the gradient
    w.r.t. block ``b``'s mask (N, c) and may return an extra gradient for
    ``I^b`` (the route by which a head reading ``I^b`` feeds back).
    """
    if not res.caches:
        raise ConfigurationError("forward was run without keep_cache=True")
    grads = {}
    d = dlogits
    fc_caches = res.caches["fc"]
    for i in range(len(fc_caches), 0, -1):
        cache, relu_cache = fc_caches[i - 1]
        if relu_cache is not None:
            d = ops.relu_backward(d, relu_cache)
        d, grads[f"fc.{i}.weight"], grads[f"fc.{i}.bias"] = ops.linear_backward(d, cache)
    d = ops.global_avg_pool_backward(d, res.caches["gap"])
    for b in range(net.arch.num_blocks, 0, -1):
        conv_cache, bn_cache, relu_cache, pool_cache = res.caches[b]
        if pool_cache is not None:
            d = ops.maxpool2d_backward(d, pool_cache)
        mask = res.masks.get(b)
        if mask is not None:
            if mask_grad_hook is not None:
                dmask = (d * res.outputs[b]).sum(axis=(2, 3))
                extra = mask_grad_hook(b, dmask)
            else:
                extra = None
            d = d * mask[:, :, None, None]
        else:
            extra = None
        d = ops.relu_backward(d, relu_cache)
        if bn_cache is not None:
            d, grads[f"bn.{b}.gamma"], grads[f"bn.{b}.beta"] = ops.batchnorm_backward(d, bn_cache)
        d, grads[f"conv.{b}.weight"] = ops.conv2d_backward(d, conv_cache)
        if extra is not None:
            d = d + extra
    return grads


def predict_logits(net, x, masks_fn_factory=None, batch_size=256):
    """Eval-mode logits in fixed-size batches.

    ``masks_fn_factory()`` builds a fresh ``mask_fn`` per batch when given.
    """
    out = []
    for s in range(0, len(x), batch_size):
        fn = masks_fn_factory() if masks_fn_factory is not None else None
        out.append(forward(net, x[s:s + batch_size], mask_fn=fn).logits)
    return np.concatenate(out) if out else np.zeros((0, net.arch.num_classes), np.float32)


# ---------------------------------------------------------------------------
# BN folding
# ---------------------------------------------------------------------------

def fold_batchnorm(net, eps=ops.BN_EPS):
    """Absorb eval-mode BN into conv weights plus a per-channel bias."""
    if net.folded:
        raise ConfigurationError("network is already folded")
    params = {}
    for b in range(1, net.arch.num_blocks + 1):
        gamma = net.params[f"bn.{b}.gamma"].astype(np.float64)
        beta = net.params[f"bn.{b}.beta"].astype(np.float64)
        mean = net.params[f"bn.{b}.running_mean"].astype(np.float64)
        var = net.params[f"bn.{b}.running_var"].astype(np.float64)
        scale = gamma / np.sqrt(var + eps)
        w = net.params[f"conv.{b}.weight"].astype(np.float64)
        params[f"conv.{b}.weight"] = (w * scale[:, None, None, None]).astype(np.float32)
        params[f"conv.{b}.bias"] = (beta - mean * scale).astype(np.float32)
    for name, p in net.params.items():
        if name.startswith("fc."):
            params[name] = p.copy()
    return Network(net.arch, params, folded=True)

"""Route diversity, calibration under corruption, and heatmap export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .efficiency import predicted_masks
from .errors import ConfigurationError
from .gating import predicted_mask_fn
from .network import forward

BLUR_SIGMAS = (0.5, 0.7, 0.9, 1.09, 1.27, 1.45)
NOISE_SIGMAS = (0.0, 0.02, 0.05, 0.11, 0.14, 0.20)


# ---------------------------------------------------------------------------
# routes
# ---------------------------------------------------------------------------

@dataclass
class LayerRoutes:
    block: int
    channels: int
    clusters: int
    cluster_sizes: list  # samples per distinct mask, descending
    core: np.ndarray  # bool (c,), kept by every observed mask
    pruning_ratio: float  # mean fraction of filters dropped

    @property
    def core_ratio(self):
        return float(self.core.sum() / self.channels)


@dataclass
class RouteStats:
    layers: dict  # block -> LayerRoutes
    samples: int

    def to_dict(self):
        return {
            "samples": self.samples,
            "layers": [{
                "block": r.block, "channels": r.channels, "clusters": r.clusters,
                "cluster_sizes": r.cluster_sizes, "core_filters": np.flatnonzero(r.core).tolist(),
                "core_ratio": r.core_ratio, "mean_pruning_ratio": r.pruning_ratio,
            } for r in self.layers.values()],
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer", "cluster_count", "core_ratio", "mean_pruning_ratio"])
            for r in self.layers.values():
                w.writerow([r.block, r.clusters, f"{r.core_ratio:.6f}", f"{r.pruning_ratio:.6f}"])


def route_stats(masks):
    """Statistics of per-sample binary masks ``{block: (N, c)}``."""
    layers, n = {}, 0
    for b in sorted(masks):
        m = np.asarray(masks[b]) > 0
        n = len(m)
        if n == 0:
            raise ConfigurationError("route statistics need at least one sample")
        _, counts = np.unique(m, axis=0, return_counts=True)
        layers[b] = LayerRoutes(b, m.shape[1], len(counts), sorted(counts.tolist(), reverse=True),
                                m.all(axis=0), float(1.0 - m.mean()))
    return RouteStats(layers, n)


def collect_routes(net, heads, x, batch_size=256):
    return route_stats(predicted_masks(net, heads, x, batch_size))


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def brier_score(probs, labels):
    """Mean over samples of the squared error summed over classes."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if np.any(np.abs(probs.sum(axis=1) - 1) > 1e-4):
        raise ConfigurationError("probability rows must sum to 1")
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1
    return float(((probs - onehot) ** 2).sum(axis=1).mean())


def gaussian_kernel1d(sigma):
    radius = max(1, int(np.floor(3 * sigma + 0.5)))
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-d ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def corrupt_gaussian_blur(images, sigma):
    """Separable Gaussian blur over the last two axes, reflect-padded."""
    if sigma < 0:
        raise ConfigurationError("sigma must be >= 0")
    images = np.asarray(images)
    if sigma == 0:
        return images.copy()
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    out = images.astype(np.float64)
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="reflect")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for t, wt in enumerate(k):
            acc += wt * np.take(p, np.arange(t, t + n), axis=axis)
        out = acc
    return out.astype(images.dtype)


def corrupt_additive_gaussian(images, sigma, seed=0):
    """Add i.i.d. N(0, sigma^2) noise from a seeded generator, clip to [0, 1]."""
    if sigma < 0:
        raise ConfigurationError("sigma must be >= 0")
    images = np.asarray(images)
    if sigma == 0:
        return images.copy()
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=images.shape)
    return np.clip(images + noise, 0.0, 1.0).astype(images.dtype)


def corrupt(images, kind, sigma, seed=0):
    if kind in ("blur", "gaussian_blur"):
        return corrupt_gaussian_blur(images, sigma)
    if kind in ("noise", "additive_gaussian"):
        return corrupt_additive_gaussian(images, sigma, seed)
    raise ConfigurationError(f"unknown corruption {kind!r}")


def predict_probs(net, heads, x, batch_size=256):
    out = []
    for s in range(0, len(x), batch_size):
        res = forward(net, x[s:s + batch_size], mask_fn=predicted_mask_fn(heads) if heads else None)
        out.append(ops.softmax(res.logits.astype(np.float64), axis=1))
    return np.concatenate(out)


@dataclass
class BrierReport:
    kind: str
    sigmas: list
    brier: dict  # variant -> list of scores, one per sigma
    accuracy: dict

    def to_dict(self):
        return {"kind": self.kind, "convention": "sum over classes, mean over samples",
                "sigmas": list(self.sigmas), "brier": self.brier, "accuracy": self.accuracy}

    def to_table(self):
        names = list(self.brier)
        lines = [f"{'sigma':>6} " + " ".join(f"{n:>14}" for n in names)]
        for i, s in enumerate(self.sigmas):
            lines.append(f"{s:>6.2f} " + " ".join(f"{self.brier[n][i]:>14.4f}" for n in names))
        return "\n".join(lines)


def shift_evaluation(models, split, kind, sigmas=None, seed=0):
    """Brier score of every model variant on corrupted copies of ``split``.

    ``models`` maps a variant name to ``(net, heads)`` (heads may be empty for
    the dense reference). Corruption is applied on the [0, 1] scale, before
    mean/std normalisation.
    """
    if sigmas is None:
        sigmas = BLUR_SIGMAS if kind in ("blur", "gaussian_blur") else NOISE_SIGMAS
    brier = {name: [] for name in models}
    acc = {name: [] for name in models}
    for sigma in sigmas:
        x = split.normalized(corrupt(split.images, kind, sigma, seed))
        for name, (net, heads) in models.items():
            p = predict_probs(net, heads, x)
            brier[name].append(brier_score(p, split.labels))
            acc[name].append(float((p.argmax(axis=1) == split.labels).mean()))
    return BrierReport(kind, list(sigmas), brier, acc)


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

def heatmap(maps):
    """Mean |activation| over channels, min-max scaled; constant maps give zeros."""
    h = np.abs(np.asarray(maps, dtype=np.float64)).mean(axis=0)
    lo, hi = h.min(), h.max()
    if hi - lo <= 0:
        return np.zeros_like(h)
    return (h - lo) / (hi - lo)


def cosine_similarity(a, b):
    a = np.ravel(a).astype(np.float64)
    b = np.ravel(b).astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(a @ b / (na * nb))


def write_pgm(path, image01):
    img = np.clip(np.rint(np.asarray(image01) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path):
    """Read a P5 file as written by :func:`write_pgm`."""
    magic, dims, maxval, data = Path(path).read_bytes().split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ConfigurationError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(data[:w * h], dtype=np.uint8).reshape(h, w)


def heatmap_export(net, heads, split, layer, n, out_dir):
    """Write (input, baseline heatmap, pruned heatmap) PGM triplets and a CSV manifest.

    The baseline heatmap comes from the unmasked forward; the pruned one from
    the gated forward with the block's predicted mask applied.
    """
    if not 1 <= layer <= net.arch.num_blocks:
        raise ConfigurationError(f"layer must be in 1..{net.arch.num_blocks}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images01 = split.images[:n]
    x = split.normalized(images01)
    dense = forward(net, x).outputs[layer]
    gated = forward(net, x, mask_fn=predicted_mask_fn(heads) if heads else None)
    mask = gated.masks.get(layer)
    pruned = gated.outputs[layer] if mask is None else gated.outputs[layer] * mask[:, :, None, None]
    rows = []
    for i in range(len(x)):
        base_raw = np.abs(dense[i]).mean(axis=0)
        pruned_raw = np.abs(pruned[i]).mean(axis=0)
        names = [f"sample{i:04d}_{kind}.pgm" for kind in ("input", "baseline", "pruned")]
        inp = images01[i].mean(axis=0)
        write_pgm(out / names[0], inp)
        write_pgm(out / names[1], heatmap(dense[i]))
        write_pgm(out / names[2], heatmap(pruned[i]))
        kept = int(mask[i].sum()) if mask is not None else net.arch.channels(layer)
        rows.append({"sample": i, "label": int(split.labels[i]), "input": names[0],
                     "baseline": names[1], "pruned": names[2], "kept_filters": kept,
                     "channels": net.arch.channels(layer),
                     "cosine": cosine_similarity(base_raw, pruned_raw)})
    with open(out / "manifest.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ["sample"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "cosine": f"{r['cosine']:.6f}"})
    return rows

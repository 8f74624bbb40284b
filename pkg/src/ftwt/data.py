"""MNIST IDX and CIFAR-10 binary readers, subsets and normalisation."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR10_MEAN, CIFAR10_STD = (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)


def _read_bytes(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e.strerror or e}") from None
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, ndim, path):
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: file too short for an IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DataError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if payload.size != int(np.prod(dims)):
        raise DataError(f"{path}: payload has {payload.size} bytes, header promises {int(np.prod(dims))}")
    return payload.reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """``(images (N,1,28,28) float32 in [0,1], labels (N,) int64)``; gzip is accepted."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = (images.astype(np.float32) / 255.0)[:, None]
    return x, labels.astype(np.int64)


def write_mnist_idx(images, labels, images_path, labels_path):
    """Write uint8 images (N,H,W) and labels (N,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_cifar10_binary(paths):
    """Concatenate CIFAR-10 binary batches into ``(N,3,32,32)`` floats and labels."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    xs, ys = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
            raise DataError(f"{path}: truncated record at byte offset {whole} "
                            f"(size {len(raw)} is not a multiple of {CIFAR_RECORD})")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = rec[:, 0]
        bad = np.flatnonzero(labels > 9)
        if bad.size:
            raise DataError(f"{path}: label {labels[bad[0]]} > 9 at byte offset {bad[0] * CIFAR_RECORD}")
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
        ys.append(labels.astype(np.int64))
    if not xs:
        raise DataError("no CIFAR-10 files given")
    return np.concatenate(xs), np.concatenate(ys)


def stratified_subset(labels, n, seed=0):
    """Indices of a class-balanced, seed-determined subset of size ``n``.

    Each class's samples are shuffled with the seed, then classes are taken in
    round-robin order until ``n`` indices are collected. The result is sorted.
    """
    labels = np.asarray(labels)
    if n is None or n >= len(labels):
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    picked = []
    depth = 0
    while len(picked) < n:
        for pool in pools:
            if depth < len(pool) and len(picked) < n:
                picked.append(pool[depth])
        depth += 1
    return np.sort(np.array(picked, dtype=np.int64))


def normalize(images, mean, std):
    mean = np.asarray(mean, np.float32)[None, :, None, None]
    std = np.asarray(std, np.float32)[None, :, None, None]
    return ((images - mean) / std).astype(np.float32)


@dataclass
class Split:
    """Images kept on the [0,1] scale; ``normalized()`` is what networks consume."""

    images: np.ndarray
    labels: np.ndarray
    mean: tuple
    std: tuple

    def normalized(self, images=None):
        return normalize(self.images if images is None else images, self.mean, self.std)

    def __len__(self):
        return len(self.labels)


def export_bundled_mnist(out_dir, n_test_per_class=250, seed=0):
    """Write the 5,000-digit MNIST sample bundled with ``mlxtend`` as IDX files.

    Produces ``train-images-idx3-ubyte`` etc. in ``out_dir``, each split in a
    seeded shuffled order, with a stratified test split of ``n_test_per_class``
    digits per class. Returns the paths.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as e:
        raise DataError("mlxtend is required to export the bundled MNIST sample") from e
    x, y = mnist_data()
    images = x.reshape(-1, 28, 28).astype(np.uint8)
    test_idx = stratified_subset(y, n_test_per_class * 10, seed)
    train_mask = np.ones(len(y), bool)
    train_mask[test_idx] = False
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k.replace('_', '-')}-idx{3 if 'images' in k else 1}-ubyte"
             for k in ("train_images", "train_labels", "test_images", "test_labels")}
    # the bundled sample is sorted by class; store each split in a seeded random order
    rng = np.random.default_rng(seed)
    train_idx = rng.permutation(np.flatnonzero(train_mask))
    test_idx = rng.permutation(test_idx)
    write_mnist_idx(images[train_idx], y[train_idx], paths["train_images"], paths["train_labels"])
    write_mnist_idx(images[test_idx], y[test_idx], paths["test_images"], paths["test_labels"])
    return {k: str(v) for k, v in paths.items()}

"""Binary checkpoint format.

Little-endian layout::

    b"FTWT" | u32 version | u32 tensor count
    per tensor: u16 name length | utf-8 name | u8 dtype (0 = float32) | u8 ndim
                | ndim x u32 dims | raw payload
    u32 metadata length | utf-8 JSON metadata

Anything else, including trailing bytes, is rejected on load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .gating import GatingHead
from .network import Architecture, Network, check_params

MAGIC = b"FTWT"
VERSION = 1
DTYPE_F32 = 0


def _pack_tensor(name, arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype != np.float32:
        raise FormatError(f"tensor {name} has dtype {arr.dtype}; only float32 is stored")
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4").tobytes()


def encode(tensors, metadata):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        parts.append(_pack_tensor(name, tensors[name]))
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint: needed {n} bytes for {what} at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(raw):
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not an FTWT checkpoint")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {VERSION})")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8") from None
        dtype, ndim = r.unpack("<BB", f"header of {name}")
        if dtype != DTYPE_F32:
            raise FormatError(f"tensor {name}: unknown dtype code {dtype}")
        dims = r.unpack(f"<{ndim}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size, f"payload of {name}")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    (mlen,) = r.unpack("<I", "metadata length")
    try:
        metadata = json.loads(r.take(mlen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"metadata is not valid JSON: {e}") from None
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after metadata")
    return tensors, metadata


def save_checkpoint(path, net, heads=None, metadata=None):
    """Write ``net`` and ``heads`` plus free-form JSON ``metadata`` to ``path``."""
    heads = heads or {}
    tensors = dict(net.params)
    for b, h in heads.items():
        tensors[f"head.{b}.weight"] = h.weight
        tensors[f"head.{b}.bias"] = h.bias
    meta = {
        "architecture": net.arch.to_dict(),
        "folded": net.folded,
        "heads": {str(b): {"use_softmax": h.use_softmax} for b, h in sorted(heads.items())},
        "info": metadata or {},
    }
    Path(path).write_bytes(encode(tensors, meta))


def load_checkpoint(path):
    """``(net, heads, info)``; raises :class:`FormatError` on any deviation."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror or e}") from None
    tensors, meta = decode(raw)
    try:
        arch = Architecture.from_dict(meta["architecture"])
        heads = {}
        for key, spec in meta["heads"].items():
            b = int(key)
            heads[b] = GatingHead(tensors.pop(f"head.{b}.weight"), tensors.pop(f"head.{b}.bias"),
                                  bool(spec["use_softmax"]))
        net = Network(arch, tensors, folded=bool(meta["folded"]))
        check_params(net)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: inconsistent checkpoint contents ({e})") from None
    return net, heads, meta.get("info", {})

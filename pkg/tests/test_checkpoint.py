import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftwt.checkpoint import decode, encode, load_checkpoint, save_checkpoint
from ftwt.errors import FormatError
from ftwt.gating import build_heads
from ftwt.network import build_network, fold_batchnorm, mnist_net

from conftest import tiny_arch


def _saved(tmp_path, softmax=True):
    net = build_network(tiny_arch(), 3)
    heads = build_heads(net.arch, use_softmax=softmax)
    heads[2].weight[:] = np.random.default_rng(0).normal(size=heads[2].weight.shape)
    path = tmp_path / "m.ftwt"
    save_checkpoint(path, net, heads, {"mode": "decoupled", "seed": 3})
    return net, heads, path


def test_roundtrip_bit_identical(tmp_path):
    net, heads, path = _saved(tmp_path, softmax=False)
    net2, heads2, info = load_checkpoint(path)
    assert net2.arch == net.arch and not net2.folded
    assert all(net.params[k].tobytes() == net2.params[k].tobytes() for k in net.params)
    assert set(net2.params) == set(net.params)
    assert all(heads[b].weight.tobytes() == heads2[b].weight.tobytes() for b in heads)
    assert heads2[2].use_softmax is False
    assert info == {"mode": "decoupled", "seed": 3}


def test_same_model_same_bytes(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = _saved(tmp_path / "a")[2], _saved(tmp_path / "b")[2]
    assert a.read_bytes() == b.read_bytes()


def test_folded_roundtrip(tmp_path):
    f = fold_batchnorm(build_network(mnist_net(), 0))
    save_checkpoint(tmp_path / "f", f)
    g, heads, _ = load_checkpoint(tmp_path / "f")
    assert g.folded and heads == {}
    assert g.params["conv.3.bias"].tobytes() == f.params["conv.3.bias"].tobytes()


def test_corrupted_magic(tmp_path):
    _, _, path = _saved(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_truncated_mid_tensor(tmp_path):
    _, _, path = _saved(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)


def test_trailing_bytes_and_version(tmp_path):
    _, _, path = _saved(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "nope")


def test_missing_tensor_rejected(tmp_path):
    tensors, meta = decode(_saved(tmp_path)[2].read_bytes())
    del tensors["conv.2.weight"]
    (tmp_path / "bad").write_bytes(encode(tensors, meta))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad")


def test_non_float32_refused(tmp_path):
    with pytest.raises(FormatError):
        encode({"a": np.zeros(2, np.float64)}, {})


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_fuzzed_bytes_never_load_silently(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("fuzz") / "m.ftwt"
    net = build_network(tiny_arch(channels=(2, 2, 2)), 0)
    save_checkpoint(path, net, build_heads(net.arch))
    raw = bytearray(path.read_bytes())
    choice = data.draw(st.sampled_from(["truncate", "flip_header", "append"]))
    if choice == "truncate":
        raw = raw[:data.draw(st.integers(0, len(raw) - 1))]
    elif choice == "append":
        raw += data.draw(st.binary(min_size=1, max_size=8))
    else:
        pos = data.draw(st.integers(0, 11))  # magic, version, count
        raw[pos] ^= data.draw(st.integers(1, 255))
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(path)

"""Tensor file format round trips and corruption handling."""
import numpy as np
import pytest

from segcap.tensorio import (FormatError, read_bundle, read_tensor,
                             write_bundle, write_tensor)


def test_roundtrip_shapes(tmp_path):
    r = np.random.default_rng(0)
    for shape in [(), (1,), (5,), (3, 4), (2, 3, 4), (1, 1, 1, 2)]:
        arr = r.normal(size=shape)
        path = tmp_path / "t.sgt"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def test_roundtrip_is_bit_exact(tmp_path):
    arr = np.array([np.pi, 1e-308, -1e308, 0.0, -0.0])
    path = tmp_path / "t.sgt"
    write_tensor(path, arr)
    assert read_tensor(path).tobytes() == arr.tobytes()


def test_write_is_deterministic(tmp_path):
    arr = np.random.default_rng(1).normal(size=(6, 7))
    p1, p2 = tmp_path / "a.sgt", tmp_path / "b.sgt"
    write_tensor(p1, arr)
    write_tensor(p2, arr)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "t.sgt"
    write_tensor(path, np.ones(3))
    raw = bytearray(path.read_bytes())
    raw[0] = ord(b"X")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_tensor(path)


def test_bundle_roundtrip(tmp_path):
    r = np.random.default_rng(2)
    tensors = {
        "weights.w1": r.normal(size=(3, 5)),
        "bias": r.normal(size=(5,)),
        "scalar": np.asarray(0.25),
        "unicode.名前": r.normal(size=(2,)),
    }
    path = tmp_path / "b.sgb"
    write_bundle(path, tensors)
    back = read_bundle(path)
    assert list(back) == list(tensors)
    for name, arr in tensors.items():
        assert back[name].shape == arr.shape
        assert np.array_equal(back[name], arr)


def test_bundle_bad_magic(tmp_path):
    path = tmp_path / "b.sgb"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError):
        read_bundle(path)


def test_tensor_file_not_a_bundle(tmp_path):
    path = tmp_path / "t.sgt"
    write_tensor(path, np.ones((2, 2)))
    with pytest.raises(FormatError):
        read_bundle(path)

"""Container format: round trips, determinism, corruption detection."""

from __future__ import annotations

import json

import numpy as np
import pytest

from dosegraph.container import ContainerError, read_container, write_container

MAGIC = b"DGTEST01"


def sample_tensors(rng):
    return [
        ("floats32", rng.normal(size=(3, 4)).astype(np.float32)),
        ("floats64", rng.normal(size=(2, 2, 2))),
        ("ints", rng.integers(-5, 5, size=(7,))),
    ]


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = sample_tensors(rng)
    path = tmp_path / "a.bin"
    write_container(path, MAGIC, {"kind": "demo", "note": "x"}, tensors)
    header, arrays = read_container(path, MAGIC)
    assert header["kind"] == "demo"
    assert header["format_version"] == 1
    for name, arr in tensors:
        assert arrays[name].dtype == arr.dtype
        assert np.array_equal(arrays[name], arr)


def test_manifest_describes_tensors(tmp_path):
    path = tmp_path / "a.bin"
    write_container(path, MAGIC, {}, [("t", np.zeros((2, 3), dtype=np.float32))])
    header, _ = read_container(path, MAGIC)
    assert header["tensors"] == [{"name": "t", "shape": [2, 3], "dtype": "f4"}]


def test_two_writes_byte_identical(tmp_path):
    rng = np.random.default_rng(1)
    tensors = sample_tensors(rng)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    write_container(a, MAGIC, {"z": 1, "a": 2}, tensors)
    write_container(b, MAGIC, {"a": 2, "z": 1}, tensors)
    assert a.read_bytes() == b.read_bytes()


def test_header_is_canonical_json(tmp_path):
    path = tmp_path / "a.bin"
    write_container(path, MAGIC, {"beta": 1, "alpha": 2}, [])
    raw = path.read_bytes()
    header_len = int.from_bytes(raw[8:12], "little")
    header = raw[12 : 12 + header_len].decode("utf-8")
    assert header == json.dumps(json.loads(header), sort_keys=True, separators=(",", ":"))
    assert header.index('"alpha"') < header.index('"beta"')


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "a.bin"
    write_container(path, MAGIC, {}, [])
    with pytest.raises(ContainerError, match="magic"):
        read_container(path, b"DGOTHER1")


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "a.bin"
    write_container(path, MAGIC, {}, [("t", np.zeros(8))])
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ContainerError, match="bytes"):
        read_container(path, MAGIC)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "a.bin"
    write_container(path, MAGIC, {}, [("t", np.zeros(8))])
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(ContainerError, match="trailing"):
        read_container(path, MAGIC)


def test_bad_magic_length_rejected(tmp_path):
    with pytest.raises(ContainerError, match="8 bytes"):
        write_container(tmp_path / "a.bin", b"SHORT", {}, [])


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ContainerError, match="dtype"):
        write_container(tmp_path / "a.bin", MAGIC, {}, [("t", np.zeros(3, dtype=np.int32))])


def test_non_contiguous_tensor_round_trips(tmp_path):
    arr = np.arange(24, dtype=np.float64).reshape(4, 6)[:, ::2]
    path = tmp_path / "a.bin"
    write_container(path, MAGIC, {}, [("t", arr)])
    _, arrays = read_container(path, MAGIC)
    assert np.array_equal(arrays["t"], arr)

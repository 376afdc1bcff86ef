"""Shared on-disk container: 8-byte magic, JSON header, raw tensor payloads.

Both case bundles and parameter checkpoints use this layout. The header is
canonical JSON (sorted keys, fixed separators) so writing the same content
twice produces byte-identical files. Tensor payloads are raw little-endian
arrays concatenated in header-declared order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class ContainerError(ValueError):
    """Malformed container file."""


FORMAT_VERSION = 1

# dtype codes allowed in tensor manifests
_DTYPES = {
    "f4": np.dtype("<f4"),
    "f8": np.dtype("<f8"),
    "i8": np.dtype("<i8"),
}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def write_container(path, magic: bytes, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write a container file.

    `header` must be JSON-serializable; a `tensors` manifest and format
    version are added to it. Arrays are written in the given order.
    """
    if len(magic) != 8:
        raise ContainerError(f"magic must be 8 bytes, got {len(magic)}")
    manifest = []
    blobs = []
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        code = {np.dtype("float32"): "f4", np.dtype("float64"): "f8", np.dtype("int64"): "i8"}.get(arr.dtype)
        if code is None:
            raise ContainerError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    full_header = dict(header)
    full_header["format_version"] = FORMAT_VERSION
    full_header["tensors"] = manifest
    header_bytes = _canonical_json(full_header)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container file, returning (header, tensors by name)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise ContainerError(f"{path}: file too short to hold a container header")
    if raw[:8] != magic:
        raise ContainerError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    (header_len,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + header_len:
        raise ContainerError(f"{path}: truncated header ({header_len} bytes declared)")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: malformed header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format_version {header.get('format_version')}")
    tensors: dict[str, np.ndarray] = {}
    offset = 12 + header_len
    for entry in header.get("tensors", []):
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise ContainerError(f"{path}: unknown dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise ContainerError(
                f"{path}: tensor {entry['name']!r} payload truncated "
                f"(need {nbytes} bytes at offset {offset}, file has {len(raw)})"
            )
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset)
        tensors[entry["name"]] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ContainerError(f"{path}: {len(raw) - offset} trailing bytes after declared payloads")
    return header, tensors

"""PXW1 weight container reading and writing.

Layout, byte exact:

    magic "PXW1" (4 bytes)
    format version, u32 little-endian
    header length, u64 little-endian
    UTF-8 JSON header (model metadata and a tensor directory of
        {name, shape, offset})
    zero padding, then raw tensor payloads: little-endian float32,
        row-major, each starting at a 64-byte aligned file offset

Directory offsets are absolute file offsets.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContainerError

MAGIC = b"PXW1"
FORMAT_VERSION = 1
_ALIGN = 64
_PREFIX = len(MAGIC) + 4 + 8  # magic + version + header length


def _align_up(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Serialize ``header`` plus named float32 tensors to ``path``.

    The tensor directory is (re)built here; any ``tensors`` key in the
    incoming header is replaced. Directory order follows sorted names
    so output bytes are reproducible.
    """
    names = sorted(tensors)
    arrays = {}
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        arrays[name] = arr

    # Offsets depend on the header length, which depends on the offset
    # digits; iterate to a fixed point (converges in a few rounds).
    offsets = {name: 0 for name in names}
    for _ in range(10):
        directory = [
            {"name": n, "shape": list(arrays[n].shape), "offset": offsets[n]} for n in names
        ]
        body = dict(header)
        body["tensors"] = directory
        header_bytes = json.dumps(body, sort_keys=True).encode("utf-8")
        pos = _align_up(_PREFIX + len(header_bytes))
        new_offsets = {}
        end = _PREFIX + len(header_bytes)
        for n in names:
            new_offsets[n] = pos
            end = pos + arrays[n].nbytes
            pos = _align_up(end)
        if new_offsets == offsets:
            break
        offsets = new_offsets
    else:
        raise ContainerError("container offset layout did not converge")

    total = end  # no padding after the final tensor
    blob = bytearray(total)
    blob[: len(MAGIC)] = MAGIC
    blob[4:8] = struct.pack("<I", FORMAT_VERSION)
    blob[8:16] = struct.pack("<Q", len(header_bytes))
    blob[16 : 16 + len(header_bytes)] = header_bytes
    for n in names:
        off = offsets[n]
        blob[off : off + arrays[n].nbytes] = arrays[n].tobytes()
    Path(path).write_bytes(bytes(blob))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container file into (header, tensors). Validates framing."""
    p = Path(path)
    if not p.is_file():
        raise ContainerError(f"container file not found: {p}")
    data = p.read_bytes()
    if len(data) < _PREFIX:
        raise ContainerError(f"container truncated: {len(data)} bytes is smaller than the fixed prefix")
    if data[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"unrecognized container: expected magic {MAGIC!r}, got {data[:4]!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version} (engine supports {FORMAT_VERSION})")
    (header_len,) = struct.unpack("<Q", data[8:16])
    if _PREFIX + header_len > len(data):
        raise ContainerError("container truncated inside the JSON header")
    try:
        header = json.loads(data[_PREFIX : _PREFIX + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"container header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerError("container header must be a JSON object")

    directory = header.get("tensors")
    if not isinstance(directory, list):
        raise ContainerError("container header lacks a tensor directory")
    tensors: dict[str, np.ndarray] = {}
    for entry in directory:
        try:
            name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError) as exc:
            raise ContainerError(f"malformed tensor directory entry: {entry!r}") from exc
        if offset % _ALIGN != 0:
            raise ContainerError(f"tensor {name!r} offset {offset} is not {_ALIGN}-byte aligned")
        count = 1
        for d in shape:
            if not isinstance(d, int) or d < 1:
                raise ContainerError(f"tensor {name!r} has invalid shape {shape}")
            count *= d
        end = offset + count * 4
        if end > len(data):
            raise ContainerError(f"container truncated: tensor {name!r} extends to byte {end} of {len(data)}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return header, tensors

"""Minimal deterministic PNG codec.

Writes 8-bit RGB/RGBA images with filter type 0 on every scanline and a
fixed zlib level, so identical pixel buffers always produce identical
files. Reads 8-bit grayscale, RGB, and RGBA (all five scanline filters);
palette, 16-bit, and interlaced files are rejected with a diagnostic.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import InputError

_MAGIC = b"\x89PNG\r\n\x1a\n"
_ZLIB_LEVEL = 6


def _chunk(kind: bytes, body: bytes) -> bytes:
    return (
        struct.pack(">I", len(body))
        + kind
        + body
        + struct.pack(">I", zlib.crc32(kind + body) & 0xFFFFFFFF)
    )


def encode_png(image: np.ndarray) -> bytes:
    """Encode an (h, w, 3|4) uint8 array as PNG bytes."""
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] not in (3, 4):
        raise InputError(f"encode_png expects (h, w, 3|4) uint8, got {image.dtype} {image.shape}")
    h, w, channels = image.shape
    color_type = 2 if channels == 3 else 6
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    raw = bytearray()
    for y in range(h):
        raw.append(0)  # filter: None
        raw.extend(image[y].tobytes())
    compressed = zlib.compress(bytes(raw), _ZLIB_LEVEL)
    return _MAGIC + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", compressed) + _chunk(b"IEND", b"")


def write_png(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(image))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _unfilter(data: bytes, h: int, w: int, bpp: int) -> np.ndarray:
    stride = w * bpp
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    for y in range(h):
        ftype = data[pos]
        pos += 1
        row = bytearray(data[pos : pos + stride])
        pos += stride
        prev = out[y - 1] if y > 0 else np.zeros(stride, dtype=np.uint8)
        if ftype == 0:
            pass
        elif ftype == 1:
            for i in range(bpp, stride):
                row[i] = (row[i] + row[i - bpp]) & 0xFF
        elif ftype == 2:
            for i in range(stride):
                row[i] = (row[i] + int(prev[i])) & 0xFF
        elif ftype == 3:
            for i in range(stride):
                left = row[i - bpp] if i >= bpp else 0
                row[i] = (row[i] + ((left + int(prev[i])) >> 1)) & 0xFF
        elif ftype == 4:
            for i in range(stride):
                left = row[i - bpp] if i >= bpp else 0
                up = int(prev[i])
                ul = int(out[y - 1, i - bpp]) if (i >= bpp and y > 0) else 0
                row[i] = (row[i] + _paeth(left, up, ul)) & 0xFF
        else:
            raise InputError(f"PNG scanline uses unknown filter type {ftype}")
        out[y] = np.frombuffer(bytes(row), dtype=np.uint8)
    return out


def decode_png(data: bytes) -> np.ndarray:
    """Decode PNG bytes to an (h, w, 3) uint8 RGB array (alpha dropped)."""
    if data[: len(_MAGIC)] != _MAGIC:
        raise InputError("not a PNG file (bad signature)")
    pos = len(_MAGIC)
    width = height = None
    color_type = bit_depth = None
    idat = bytearray()
    while pos < len(data):
        if pos + 8 > len(data):
            raise InputError("truncated PNG chunk header")
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        kind = data[pos + 4 : pos + 8]
        body = data[pos + 8 : pos + 8 + length]
        if len(body) != length:
            raise InputError("truncated PNG chunk body")
        pos += 12 + length
        if kind == b"IHDR":
            width, height, bit_depth, color_type, _comp, _filt, interlace = struct.unpack(
                ">IIBBBBB", body
            )
            if bit_depth != 8:
                raise InputError(f"unsupported PNG bit depth {bit_depth} (only 8 supported)")
            if color_type not in (0, 2, 6):
                raise InputError(f"unsupported PNG color type {color_type} (gray/RGB/RGBA only)")
            if interlace != 0:
                raise InputError("interlaced PNG is not supported")
        elif kind == b"IDAT":
            idat.extend(body)
        elif kind == b"IEND":
            break
    if width is None:
        raise InputError("PNG has no IHDR chunk")
    bpp = {0: 1, 2: 3, 6: 4}[color_type]
    raw = zlib.decompress(bytes(idat))
    expected = height * (1 + width * bpp)
    if len(raw) != expected:
        raise InputError(f"PNG pixel data has {len(raw)} bytes, expected {expected}")
    flat = _unfilter(raw, height, width, bpp)
    pixels = flat.reshape(height, width, bpp)
    if color_type == 0:
        pixels = np.repeat(pixels, 3, axis=2)
    elif color_type == 6:
        pixels = pixels[:, :, :3]
    return np.ascontiguousarray(pixels)


def read_png(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"image file not found: {p}")
    return decode_png(p.read_bytes())

"""SFR1 raster files and PPM image export.

SFR1 layout (all integers little-endian)::

    4 bytes   magic b"SFR1"
    uint32    rows
    uint32    cols
    uint32    channels
    uint32    dtype code (1 = float32 little-endian)
    uint16    unit tag length n
    n bytes   unit tag, UTF-8
    payload   rows * cols * channels float32 samples, row-major, channels interleaved
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SFR1"
FLOAT32 = 1
_HEADER = struct.Struct("<4sIIII")
_UNIT_LEN = struct.Struct("<H")


def encode_raster(array, unit=""):
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3 or min(a.shape) < 1:
        raise DataError(f"raster must be rows x cols [x channels], got shape {np.shape(array)}")
    rows, cols, channels = a.shape
    tag = unit.encode("utf-8")
    if len(tag) > 0xFFFF:
        raise DataError("unit tag too long")
    payload = np.ascontiguousarray(a, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, rows, cols, channels, FLOAT32) + _UNIT_LEN.pack(len(tag)) + tag + payload


def decode_raster(data):
    """Inverse of :func:`encode_raster`; returns ``(array, unit)``.

    Single-channel rasters come back two-dimensional.
    """
    if len(data) < _HEADER.size + _UNIT_LEN.size:
        raise DataError("truncated raster header")
    magic, rows, cols, channels, dtype = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DataError(f"not an SFR1 raster (magic {magic!r})")
    if dtype != FLOAT32:
        raise DataError(f"unsupported raster dtype code {dtype}")
    if min(rows, cols, channels) < 1:
        raise DataError("raster header has a zero dimension")
    (n,) = _UNIT_LEN.unpack_from(data, _HEADER.size)
    start = _HEADER.size + _UNIT_LEN.size
    unit = data[start:start + n].decode("utf-8")
    offset = start + n
    expected = rows * cols * channels * 4
    if len(data) - offset != expected:
        raise DataError(f"raster payload is {len(data) - offset} bytes, expected {expected}")
    a = np.frombuffer(data, dtype="<f4", offset=offset).reshape(rows, cols, channels)
    if channels == 1:
        a = a[..., 0]
    return a.astype(np.float32), unit


def write_raster(path, array, unit=""):
    Path(path).write_bytes(encode_raster(array, unit))


def read_raster(path):
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"missing raster {path}") from exc
    return decode_raster(data)


def encode_ppm(rgb):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise DataError("PPM export needs a rows x cols x 3 uint8 image")
    rows, cols = rgb.shape[:2]
    return f"P6\n{cols} {rows}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()


def write_ppm(path, rgb):
    Path(path).write_bytes(encode_ppm(rgb))


def read_ppm(path):
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise DataError(f"{path} is not an 8-bit binary PPM")
    cols, rows = int(parts[1]), int(parts[2])
    pixels = data[len(data) - rows * cols * 3:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(rows, cols, 3)

"""Little-endian binary containers for volumes, masks, probability maps and weights.

Volume   ``SPV1 | u32 nx ny nz | f32[nx*ny*nz]``
Mask     ``SPM1 | u32 nx ny nz | u8[nx*ny*nz]``
ProbMap  ``SPP1 | u32 nx ny nz | f32[nx*ny*nz]``
Weights  ``SPW1 | u32 count | {u16 len, name, u8 ndim, u32 dims[ndim], f32 data}*``

Voxel payloads are x-fastest, so an in-memory ``(nx, ny, nz)`` array is
written in Fortran order.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

VOLUME_MAGIC = b"SPV1"
MASK_MAGIC = b"SPM1"
PROBMAP_MAGIC = b"SPP1"
WEIGHTS_MAGIC = b"SPW1"

# refuse headers describing more than 2**31 voxels
MAX_VOXELS = 2 ** 31

_GRID_DTYPES = {VOLUME_MAGIC: "<f4", MASK_MAGIC: "u1", PROBMAP_MAGIC: "<f4"}


def _encode_grid(magic, array):
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise ParameterError(f"expected a 3-d array, got shape {arr.shape}")
    if magic == MASK_MAGIC and arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ParameterError("mask labels must fit in u8")
    payload = np.asarray(arr, dtype=_GRID_DTYPES[magic]).tobytes(order="F")
    return magic + struct.pack("<3I", *arr.shape) + payload


def _decode_grid(magic, buf):
    if len(buf) < 4:
        raise FormatError(f"file too short for magic {magic.decode()!r}", len(buf))
    if buf[:4] != magic:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {magic!r}", 0)
    if len(buf) < 16:
        raise FormatError("truncated header", len(buf))
    dims = struct.unpack_from("<3I", buf, 4)
    if 0 in dims:
        raise FormatError(f"zero dimension in header {dims}", 4)
    n = dims[0] * dims[1] * dims[2]
    if n > MAX_VOXELS:
        raise FormatError(f"header dims {dims} overflow the {MAX_VOXELS}-voxel limit", 4)
    dtype = np.dtype(_GRID_DTYPES[magic])
    need = 16 + n * dtype.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated payload: header dims {dims} need {need} bytes, file has {len(buf)}",
                          len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", need)
    flat = np.frombuffer(buf, dtype=dtype, count=n, offset=16)
    return flat.reshape(dims, order="F").astype(dtype.newbyteorder("="), copy=True)


def _write(path, data):
    Path(path).write_bytes(data)


def _read(path):
    return Path(path).read_bytes()


def write_volume(path, volume):
    _write(path, _encode_grid(VOLUME_MAGIC, volume))


def read_volume(path):
    vol = _decode_grid(VOLUME_MAGIC, _read(path))
    if not np.all(np.isfinite(vol)):
        raise FormatError("volume contains non-finite values", 16)
    return vol


def write_mask(path, mask):
    _write(path, _encode_grid(MASK_MAGIC, mask))


def read_mask(path):
    return _decode_grid(MASK_MAGIC, _read(path))


def write_probability_map(path, pmap):
    _write(path, _encode_grid(PROBMAP_MAGIC, pmap))


def read_probability_map(path):
    return _decode_grid(PROBMAP_MAGIC, _read(path))


def encode_weights(arrays) -> bytes:
    parts = [WEIGHTS_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ParameterError(f"tensor '{name}' cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.asarray(arr, dtype="<f4").tobytes(order="C"))
    return b"".join(parts)


def decode_weights(buf) -> "OrderedDict[str, np.ndarray]":
    if len(buf) < 4 or buf[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {WEIGHTS_MAGIC!r}", 0)
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}", len(buf))
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        if n > MAX_VOXELS:
            raise FormatError(f"tensor '{name}' dims {dims} overflow", pos - 4 * ndim)
        data = take(4 * n, f"data of tensor '{name}'")
        out[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return out


def write_weights(path, arrays):
    _write(path, encode_weights(arrays))


def read_weights(path):
    return decode_weights(_read(path))

"""Binary file formats for tensors (``VIMT``) and token grids (``VIMQ``).

All integers are little-endian.

VIMT: ``b"VIMT"``, u8 version (1), u8 dtype code (0 float32, 1 float64),
u8 rank, rank x u32 extents, raw row-major payload.

VIMQ: ``b"VIMQ"``, u8 version (1), u32 K, u16 height, u16 width, u8 label
flag, [u32 class label if flag], height*width x u16 indices row-major.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, MagicError, TruncatedError, VersionError
from .prior import TokenGrid
from .tensor import Tensor

TENSOR_MAGIC = b"VIMT"
GRID_MAGIC = b"VIMQ"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0, what: str = "file"):
        self.buf = buf
        self.pos = offset
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.what} truncated: needed {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise FormatError(f"dtype {arr.dtype} cannot be stored as VIMT")
    head = TENSOR_MAGIC + struct.pack("<BBB", VERSION, _DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def read_tensor_from(reader: _Reader) -> np.ndarray:
    if reader.take(4) != TENSOR_MAGIC:
        raise MagicError("bad VIMT magic")
    version, code, rank = reader.unpack("<BBB")
    if version != VERSION:
        raise VersionError(f"unsupported VIMT version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown VIMT dtype code {code}")
    shape = reader.unpack(f"<{rank}I")
    dt = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    raw = reader.take(count * dt.itemsize)
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    reader = _Reader(buf, what="VIMT")
    arr = read_tensor_from(reader)
    if reader.pos != len(buf):
        raise FormatError(f"{len(buf) - reader.pos} trailing bytes after VIMT payload")
    return arr


def write_tensor(path, t: Tensor | np.ndarray) -> None:
    _atomic_write(path, tensor_to_bytes(t))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def grid_to_bytes(grid: TokenGrid, K: int) -> bytes:
    if not 0 < K <= 65536:
        raise FormatError(f"vocabulary size {K} does not fit u16 indices")
    grid.validate(K)
    if not (0 < grid.height < 65536 and 0 < grid.width < 65536):
        raise FormatError("grid extents do not fit u16")
    out = GRID_MAGIC + struct.pack("<BIHH", VERSION, K, grid.height, grid.width)
    if grid.class_label is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<BI", 1, grid.class_label)
    return out + grid.indices.astype("<u2").tobytes()


def grid_from_bytes(buf: bytes) -> tuple[TokenGrid, int]:
    """Parse a VIMQ payload; returns the grid and its vocabulary size K."""
    r = _Reader(buf, what="VIMQ")
    if r.take(4) != GRID_MAGIC:
        raise MagicError("bad VIMQ magic")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise VersionError(f"unsupported VIMQ version {version}")
    K, h, w = r.unpack("<IHH")
    (flag,) = r.unpack("<B")
    if flag not in (0, 1):
        raise FormatError(f"bad VIMQ label flag {flag}")
    label = r.unpack("<I")[0] if flag else None
    ids = np.frombuffer(r.take(2 * h * w), dtype="<u2").astype(np.int64)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after VIMQ payload")
    return TokenGrid(h, w, ids, label).validate(K), K


def write_grid(path, grid: TokenGrid, K: int) -> None:
    _atomic_write(path, grid_to_bytes(grid, K))


def read_grid(path) -> tuple[TokenGrid, int]:
    return grid_from_bytes(Path(path).read_bytes())


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)

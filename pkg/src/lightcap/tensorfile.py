"""Binary tensor file format.

Layout: magic "LTEN", u32 version (1), u8 dtype (0 = float32, 1 = float64),
u8 rank, rank x u32 dims, then the payload little-endian row-major. All
integers little-endian. Errors report the byte offset at which parsing
failed. External data files (grid features, concept embeddings) use
dtype 0; checkpoints reuse these records with dtype 1 for training
precision.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError

MAGIC = b"LTEN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_record(fh: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if not arr.flags["C_CONTIGUOUS"]:
        # ascontiguousarray would promote rank-0 arrays, so guard it
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float32)
    code = _DTYPE_CODES[arr.dtype]
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def _read_exact(fh: BinaryIO, n: int, offset: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(
            f"truncated tensor record while reading {what} "
            f"(wanted {n} bytes, got {len(buf)})",
            offset=offset + len(buf),
        )
    return buf


def read_record(fh: BinaryIO) -> np.ndarray:
    start = fh.tell()
    magic = _read_exact(fh, 4, start, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=start)
    (version,) = struct.unpack("<I", _read_exact(fh, 4, start + 4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=start + 4)
    dtype_code, rank = struct.unpack("<BB", _read_exact(fh, 2, start + 8, "header"))
    if dtype_code not in _DTYPES:
        raise FormatError(f"unknown dtype code {dtype_code}", offset=start + 8)
    dims_bytes = _read_exact(fh, 4 * rank, start + 10, "dims")
    dims = struct.unpack(f"<{rank}I", dims_bytes)
    if any(d < 1 for d in dims):
        raise FormatError(f"non-positive dim in {dims}", offset=start + 10)
    dtype = _DTYPES[dtype_code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload_offset = start + 10 + 4 * rank
    payload = _read_exact(fh, count * dtype.itemsize, payload_offset, "payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("="))


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_record(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_record(fh)

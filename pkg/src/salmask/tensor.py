"""Dense float32 tensor helpers and the SMT1 packed tensor file format.

Tensors are plain numpy arrays, float32 row-major for all pipeline
arithmetic (u8 only at the dataset-blob boundary). SMT1 layout:

    bytes 0-3   magic ASCII "SMT1"
    u32 LE      rank
    rank * u32  extents (LE)
    u8          dtype code: 0 = f32 LE, 1 = u8
    payload     raw row-major data
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError

MAGIC = b"SMT1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES_BY_KIND = {np.dtype("<f4"): 0, np.dtype("u1"): 1}


def as_f32(x) -> np.ndarray:
    """Contiguous float32 view/copy of ``x``."""
    return np.ascontiguousarray(x, dtype=np.float32)


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def write_smt1(path, arr: np.ndarray) -> None:
    # ascontiguousarray would promote rank-0 to rank-1; tobytes() below
    # already emits C order for any layout.
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.uint8:
        code = 1
    else:
        raise FormatError(f"SMT1 stores f32 or u8, got {arr.dtype}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(struct.pack("B", code))
        f.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())


def read_smt1(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    try:
        (rank,) = struct.unpack_from("<I", blob, 4)
        shape = struct.unpack_from(f"<{rank}I", blob, 8)
        (code,) = struct.unpack_from("B", blob, 8 + 4 * rank)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header ({exc})") from exc
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    payload = blob[8 + 4 * rank + 1:]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()

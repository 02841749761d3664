"""Flat binary tensor container (magic ``JVT1``) and JSON checkpoint manifests.

Layout, all integers little-endian u64 after the 4-byte magic:

    "JVT1" | dtype code | rank | extent[0..rank) | raw element bytes (LE, C order)

dtype codes: 0 = float32, 1 = float64.  No alignment, no checksum; the file
length is fully determined by the header and is validated on load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import FLOAT_DTYPES, MAX_RANK, Tensor

MAGIC = b"JVT1"
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensor(path, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in FLOAT_DTYPES:
        raise FormatError(f"only float32/float64 tensors are serializable, got {arr.dtype}")
    if arr.ndim > MAX_RANK:
        raise FormatError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    header = MAGIC + struct.pack(
        f"<{2 + arr.ndim}Q", _DTYPE_TO_CODE[arr.dtype], arr.ndim, *arr.shape
    )
    payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def load_tensor(path) -> Tensor:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"{p}: no such file")
    raw = p.read_bytes()
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    code, rank = struct.unpack_from("<2Q", raw, 4)
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if rank > MAX_RANK:
        raise FormatError(f"{path}: rank {rank} exceeds {MAX_RANK}")
    off = 4 + 16
    if len(raw) < off + 8 * rank:
        raise FormatError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", raw, off) if rank else ()
    off += 8 * rank
    dtype = _CODE_TO_DTYPE[code]
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = off + n * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: payload length {len(raw) - off}, expected {expected - off}")
    # copy=True: frombuffer views are read-only, and ascontiguousarray would
    # promote rank-0 arrays to shape (1,).
    arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off)
    return Tensor._make(arr.astype(dtype.newbyteorder("="), copy=True).reshape(shape))


def write_json(path, obj) -> None:
    """Canonical JSON: sorted keys, 2-space indent, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    p = Path(path)
    if not p.exists():
        raise FormatError(f"{p}: no such file")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{p}: invalid JSON ({e})") from None

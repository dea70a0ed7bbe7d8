"""Binary tensor and checkpoint file formats.

Tensor file ("LDRT"): magic bytes ``LDRT``, u32 version=1, u32 rank,
rank x u64 dims, then the values as little-endian IEEE-754 32-bit floats in
row-major order.  All integers are little-endian.

Checkpoint file ("LDRC"): magic bytes ``LDRC``, u32 version=1, u32 entry
count, then per entry a u32 name byte-length, the UTF-8 name, and an
embedded LDRT tensor.

Checkpoints written by the trainer additionally contain one zero-length
entry whose name is ``meta:`` followed by a JSON document (model
configuration, routing mode, step counter metadata).  Readers that only
care about tensors can skip it like any other entry.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .validation import ValidationError

TENSOR_MAGIC = b"LDRT"
CHECKPOINT_MAGIC = b"LDRC"
FORMAT_VERSION = 1
META_PREFIX = "meta:"


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    header = TENSOR_MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return header + dims + payload


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Parse one LDRT blob; returns (float32 array, next offset)."""
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise ValidationError(f"bad tensor magic at offset {offset}")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported tensor format version {version}")
    pos = offset + 12
    dims = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
    pos += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    if rank == 0:
        count = 1
    nbytes = 4 * count
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return data.copy(), pos + nbytes


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    arr, _ = tensor_from_bytes(Path(path).read_bytes())
    return arr


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named tensors (and an optional JSON metadata entry)."""
    parts = []
    entries = list(tensors.items())
    if meta is not None:
        name = META_PREFIX + json.dumps(meta, sort_keys=True, separators=(",", ":"))
        entries.append((name, np.zeros((0,), dtype=np.float32)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + tensor_to_bytes(arr))
    header = CHECKPOINT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(entries))
    Path(path).write_bytes(header + b"".join(parts))


def load_checkpoint(path):
    """Read a checkpoint; returns (dict name -> float32 array, meta dict or None)."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    meta = None
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        arr, pos = tensor_from_bytes(buf, pos)
        if name.startswith(META_PREFIX):
            meta = json.loads(name[len(META_PREFIX) :])
        else:
            tensors[name] = arr
    return tensors, meta

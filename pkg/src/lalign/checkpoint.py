"""Binary checkpoints ("LALN"): named tensors plus a JSON metadata blob.

Layout, all little-endian: magic "LALN", format version u32, config
fingerprint (u32 length + utf-8), metadata JSON (u32 length + utf-8),
tensor count u64, then per record: name (u32 length + utf-8), dtype code
u8, ndim u32, dims u64 each, raw array bytes. Round-trips are bitwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"LALN"
FORMAT_VERSION = 1

_DTYPE_CODES = {"<f4": 0, "<f8": 1, "<i8": 2, "<u2": 3, "|u1": 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NATIVE = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint16, 4: np.uint8}


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    fingerprint: str
    meta: dict
    tensors: dict[str, np.ndarray]


def _dtype_code(arr: np.ndarray) -> int:
    key = np.dtype(arr.dtype).newbyteorder("<").str
    if key == "|u1":
        key = "|u1"
    if key not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return _DTYPE_CODES[key]


def save_checkpoint(path, fingerprint: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    fp = fingerprint.encode()
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(fp)))
        f.write(fp)
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr)
            code = _dtype_code(arr)
            name_b = name.encode()
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", code))
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype(_CODE_DTYPES[code], copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 8

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[off : off + n]
        off += n
        return chunk

    (fp_len,) = struct.unpack("<I", take(4))
    fingerprint = take(fp_len).decode()
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode())
    (count,) = struct.unpack("<Q", take(8))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (code,) = struct.unpack("<B", take(1))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        (ndim,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(_CODE_DTYPES[code]).itemsize
        arr = np.frombuffer(take(nbytes), dtype=_CODE_DTYPES[code]).reshape(shape)
        tensors[name] = arr.astype(_NATIVE[code], copy=True)
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return Checkpoint(fingerprint=fingerprint, meta=meta, tensors=tensors)


def params_checksum(params) -> str:
    """Order-independent digest of named arrays; detects any bit change."""
    items = params.items() if isinstance(params, dict) else params
    h = hashlib.sha256()
    for name, t in sorted(items, key=lambda kv: kv[0]):
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def describe_checkpoint(path) -> list[dict]:
    """Tensor names, shapes, dtypes and content checksums (for inspection)."""
    ckpt = load_checkpoint(path)
    rows = []
    for name, arr in ckpt.tensors.items():
        digest = hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]
        rows.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "sha256": digest})
    return rows

"""Binary weight checkpoints.

Layout (little-endian)::

    b"TKCK"  u16 version  u16 reserved
    u32 meta_len  meta_len bytes of UTF-8 JSON metadata
    u32 n_tensors
    per tensor:
        u16 name_len  name (UTF-8)
        u8 dtype (0=f32, 1=f64, 2=i64)  u8 ndim  u32 dims[ndim]
        u64 nbytes  raw buffer (C order)
    u32 crc32 of everything above
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from tractokit.errors import CheckpointError

MAGIC = b"TKCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def encode_checkpoint(tensors: dict, meta: dict | None = None) -> bytes:
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HHI", VERSION, 0, len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        parts += [
            struct.pack("<H", len(raw_name)), raw_name,
            struct.pack("<BB", code, arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape),
            struct.pack("<Q", len(data)), data,
        ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _read(buf, off, n, what):
    if off + n > len(buf):
        raise CheckpointError(f"truncated checkpoint while reading {what}", off)
    return buf[off:off + n], off + n


def decode_checkpoint(buf: bytes) -> tuple[dict, dict]:
    magic, off = _read(buf, 0, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}", 0)
    raw, off = _read(buf, off, 8, "header")
    version, _, meta_len = struct.unpack("<HHI", raw)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    raw, off = _read(buf, off, meta_len, "metadata")
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint metadata: {exc}", 12) from exc
    raw, off = _read(buf, off, 4, "tensor count")
    (n,) = struct.unpack("<I", raw)
    tensors = {}
    for _ in range(n):
        raw, off = _read(buf, off, 2, "name length")
        raw, off = _read(buf, off, struct.unpack("<H", raw)[0], "name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("unreadable tensor name", off) from exc
        raw, off = _read(buf, off, 2, "dtype")
        code, ndim = struct.unpack("<BB", raw)
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}", off - 2)
        raw, off = _read(buf, off, 4 * ndim, "shape")
        shape = struct.unpack(f"<{ndim}I", raw)
        raw, off = _read(buf, off, 8, "size")
        (nbytes,) = struct.unpack("<Q", raw)
        if nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize:
            raise CheckpointError(f"size mismatch for tensor {name}", off - 8)
        raw, off = _read(buf, off, nbytes, f"tensor {name}")
        tensors[name] = torch.from_numpy(np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy())
    raw, end = _read(buf, off, 4, "checksum")
    if struct.unpack("<I", raw)[0] != zlib.crc32(buf[:off]):
        raise CheckpointError("checkpoint checksum mismatch", off)
    return tensors, meta


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, meta))


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def save_module(path, module: torch.nn.Module, meta: dict | None = None, prefix: str = "") -> None:
    state = {prefix + k: v for k, v in module.state_dict().items()}
    save_checkpoint(path, state, meta)


def load_module(path, module: torch.nn.Module, prefix: str = "") -> dict:
    """Load weights into ``module``; shape or name mismatches raise CheckpointError."""
    tensors, meta = load_checkpoint(path)
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    if missing:
        raise CheckpointError(f"checkpoint {path} lacks {len(missing)} tensors, e.g. {missing[:3]}")
    for k, v in own.items():
        if tuple(state[k].shape) != tuple(v.shape):
            raise CheckpointError(f"shape mismatch for {k}: checkpoint {tuple(state[k].shape)} vs model {tuple(v.shape)}")
    module.load_state_dict({k: state[k].to(own[k].dtype) for k in own}, strict=True)
    return meta

"""TDAC1 checkpoint files.

Layout (all integers little-endian)::

    b"TDAC"  u32 version=1
    u32 meta_len   meta_len bytes of UTF-8 JSON
    u32 n_arrays
    n_arrays x { u16 name_len, name, u8 rank, u32 dims[rank], u8 dtype=0, float32 payload }

The loader walks the whole structure and checks every declared size against
the file length before it copies any payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .io import atomic_write
from .models import ModelParams

MAGIC = b"TDAC"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def dumps(tensors: dict, metadata: dict) -> bytes:
    meta = canonical_json(metadata)
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.detach().to(torch.float32).numpy(), dtype="<f4", order="C")
        raw_name = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<B", DTYPE_F32), arr.tobytes()]
    return b"".join(parts)


def _scan(raw: bytes):
    """Validate structure; return metadata and (name, shape, offset) entries."""
    size = len(raw)

    def need(pos, n, what):
        if pos + n > size:
            raise CheckpointError(f"size mismatch: {what} needs {n} bytes at offset {pos}, file has {size}")

    need(0, 8, "header")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}, expected {VERSION}")
    need(8, 4, "metadata length")
    (meta_len,) = struct.unpack_from("<I", raw, 8)
    need(12, meta_len, "metadata")
    try:
        metadata = json.loads(raw[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"metadata is not valid UTF-8 JSON: {exc}") from None
    pos = 12 + meta_len
    need(pos, 4, "array count")
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    entries = []
    prev = "<none>"
    for i in range(count):
        where = f"array #{i} (after {prev!r})"
        need(pos, 2, f"{where} name length")
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        need(pos, nlen, f"{where} name")
        try:
            name = raw[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{where}: name is not valid UTF-8") from None
        pos += nlen
        need(pos, 1, f"array {name!r} rank")
        rank = raw[pos]
        pos += 1
        need(pos, 4 * rank + 1, f"array {name!r} dims")
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        dtype = raw[pos]
        pos += 1
        if dtype != DTYPE_F32:
            raise CheckpointError(f"array {name!r}: unsupported dtype code {dtype}, expected {DTYPE_F32}")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        if pos + nbytes > size:
            raise CheckpointError(f"size mismatch in array {name!r}: dims {list(dims)} declare {nbytes} "
                                  f"payload bytes but only {size - pos} remain")
        entries.append((name, tuple(dims), pos))
        pos += nbytes
        prev = name
    if pos != size:
        raise CheckpointError(f"size mismatch: {size - pos} trailing bytes after last array {prev!r}")
    return metadata, entries


def loads(raw: bytes):
    metadata, entries = _scan(raw)
    tensors = {}
    for name, dims, off in entries:
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
        tensors[name] = torch.from_numpy(arr)
    return tensors, metadata


def save_checkpoint(params, metadata: dict, path) -> bytes:
    """Write atomically; ``params`` is a ModelParams or a name->tensor dict."""
    tensors = params.tensors if isinstance(params, ModelParams) else params
    meta = dict(metadata)
    if isinstance(params, ModelParams):
        meta.setdefault("arch", params.arch)
    raw = dumps(tensors, meta)
    atomic_write(Path(path), raw)
    return raw


def load_checkpoint(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return loads(p.read_bytes())


def load_params(path) -> tuple[ModelParams, dict]:
    tensors, meta = load_checkpoint(path)
    if "arch" not in meta:
        raise CheckpointError(f"{path}: metadata has no architecture descriptor")
    return ModelParams(meta["arch"], tensors), meta

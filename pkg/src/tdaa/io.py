"""Atomic file writes, content hashes and the MANIFEST."""

from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

MANIFEST = "MANIFEST"


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir) -> Path:
    """List every artifact under ``out_dir`` with its sha256, sorted by path."""
    out = Path(out_dir)
    lines = []
    for p in sorted(out.rglob("*")):
        if not p.is_file() or p.name == MANIFEST or p.name.startswith("."):
            continue
        lines.append(f"{sha256_file(p)}  {p.relative_to(out).as_posix()}\n")
    target = out / MANIFEST
    atomic_write(target, "".join(lines).encode())
    return target


def read_manifest(out_dir) -> dict:
    entries = {}
    for line in (Path(out_dir) / MANIFEST).read_text().splitlines():
        digest, rel = line.split("  ", 1)
        entries[rel] = digest
    return entries

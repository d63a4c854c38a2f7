"""Datasets: procedural Shapes10, the CIFAR-10 binary format, augmentation, batching.

Shapes10 is integer-exact. Sample ``i`` of a split draws from its own
SplitMix64 stream seeded with ``seed ^ (split_code << 56) ^ i`` in this order:

1. background R, G, B in ``[bg_lo, bg_hi]``
2. foreground R, G, B in ``[160, 255]``
3. centre ``cx`` then ``cy`` in ``[10, 21]``
4. half-size ``s`` in ``[s_lo, s_hi]``
5. 1024 noise values in ``[-8, 8]``, one per pixel in row-major order,
   added to all three channels

A pixel is foreground iff the class predicate holds for
``dx = x - cx, dy = y - cy`` (see ``SHAPE_PREDICATES``). Bytes are clamped to
``[0, 255]`` and divided by 255.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .rng import SplitMix64, bounded, stream_block, unit_float

CLASS_NAMES = (
    "circle", "square", "triangle-up", "triangle-down", "cross",
    "ring", "h-bar", "v-bar", "diamond", "checker",
)
SPLIT_CODES = {"train": 1, "test": 2}
IMAGE_SHAPE = (3, 32, 32)
RECORD_BYTES = 1 + 3 * 32 * 32


@dataclass(frozen=True)
class ShapesStyle:
    bg_range: tuple[int, int] = (0, 95)
    fg_range: tuple[int, int] = (160, 255)
    size_range: tuple[int, int] = (6, 12)


STYLE_A = ShapesStyle()
STYLE_B = ShapesStyle(bg_range=(32, 127), size_range=(5, 10))


def _box(dx, dy, s):
    return np.maximum(np.abs(dx), np.abs(dy)) <= s


SHAPE_PREDICATES = {
    "circle": lambda dx, dy, s: dx * dx + dy * dy <= s * s,
    "square": _box,
    # apex at the top (image y grows downward)
    "triangle-up": lambda dx, dy, s: (np.abs(dy) <= s) & (2 * np.abs(dx) <= dy + s),
    "triangle-down": lambda dx, dy, s: (np.abs(dy) <= s) & (2 * np.abs(dx) <= s - dy),
    "cross": lambda dx, dy, s: _box(dx, dy, s) & ((3 * np.abs(dx) <= s) | (3 * np.abs(dy) <= s)),
    "ring": lambda dx, dy, s: (4 * (dx * dx + dy * dy) >= s * s) & (dx * dx + dy * dy <= s * s),
    "h-bar": lambda dx, dy, s: (np.abs(dx) <= s) & (3 * np.abs(dy) <= s),
    "v-bar": lambda dx, dy, s: (3 * np.abs(dx) <= s) & (np.abs(dy) <= s),
    "diamond": lambda dx, dy, s: np.abs(dx) + np.abs(dy) <= s,
    "checker": lambda dx, dy, s: _box(dx, dy, s) & ((((dx + s) // 3) + ((dy + s) // 3)) % 2 == 0),
}


@dataclass
class ImageDataset:
    images: torch.Tensor  # [N, 3, 32, 32] float32 in [0, 1]
    labels: torch.Tensor  # [N] int64
    split_tag: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.images.shape[0]
        if n == 0:
            raise ValueError("dataset must not be empty")
        if tuple(self.images.shape[1:]) != IMAGE_SHAPE:
            raise ValueError(f"images must be [N,3,32,32], got {tuple(self.images.shape)}")
        if self.labels.shape != (n,):
            raise ValueError(f"labels shape {tuple(self.labels.shape)} != ({n},)")
        if float(self.images.min()) < 0.0 or float(self.images.max()) > 1.0:
            raise ValueError("pixels must lie in [0, 1]")
        if int(self.labels.min()) < 0 or int(self.labels.max()) > 9:
            raise ValueError("labels must lie in 0..9")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def to_bytes(self) -> np.ndarray:
        """Pixels as uint8 ``[N,3,32,32]`` (exact for byte-derived data)."""
        return np.rint(self.images.numpy() * 255.0).astype(np.uint8)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.to_bytes().tobytes())
        h.update(self.labels.numpy().astype("<i8").tobytes())
        return h.hexdigest()


def _from_bytes(pixels: np.ndarray, labels: np.ndarray, split_tag: str, provenance: dict) -> ImageDataset:
    images = torch.from_numpy(pixels.astype(np.float32) / np.float32(255.0))
    return ImageDataset(images, torch.from_numpy(labels.astype(np.int64)), split_tag, provenance)


def gen_shapes10(global_seed: int, split_tag: str, count: int,
                 style: ShapesStyle = STYLE_A, source: str = "shapes10") -> ImageDataset:
    if count <= 0 or count % 10:
        raise ValueError(f"count must be a positive multiple of 10, got {count}")
    if split_tag not in SPLIT_CODES:
        raise ValueError(f"split_tag must be one of {sorted(SPLIT_CODES)}, got {split_tag!r}")
    idx = np.arange(count, dtype=np.uint64)
    seeds = np.uint64(global_seed & (2**64 - 1)) ^ (np.uint64(SPLIT_CODES[split_tag]) << np.uint64(56)) ^ idx
    draws = stream_block(seeds, 9 + 1024)

    bg = bounded(draws[:, 0:3], *style.bg_range)
    fg = bounded(draws[:, 3:6], *style.fg_range)
    cx = bounded(draws[:, 6], 10, 21)
    cy = bounded(draws[:, 7], 10, 21)
    s = bounded(draws[:, 8], *style.size_range)
    noise = bounded(draws[:, 9:], -8, 8).reshape(count, 32, 32)

    ys, xs = np.mgrid[0:32, 0:32]
    labels = (np.arange(count) % 10).astype(np.int64)
    mask = np.zeros((count, 32, 32), dtype=bool)
    for c, name in enumerate(CLASS_NAMES):
        sel = labels == c
        if not sel.any():
            continue
        dx = xs[None] - cx[sel][:, None, None]
        dy = ys[None] - cy[sel][:, None, None]
        mask[sel] = SHAPE_PREDICATES[name](dx, dy, s[sel][:, None, None])
    base = np.where(mask[:, None], fg[:, :, None, None], bg[:, :, None, None])
    pixels = np.clip(base + noise[:, None], 0, 255).astype(np.uint8)
    prov = {"source": source, "seed": int(global_seed), "split": split_tag,
            "bg_range": list(style.bg_range), "size_range": list(style.size_range)}
    return _from_bytes(pixels, labels, split_tag, prov)


# ---------------------------------------------------------------- CIFAR-10 binary


def parse_cifar10_bytes(raw: bytes, split_tag: str = "train", source: str = "cifar10") -> ImageDataset:
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise ValueError(f"truncated CIFAR-10 data: length {len(raw)} is not a positive multiple of {RECORD_BYTES}")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = recs[:, 0]
    if int(labels.max()) > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"record {bad}: label byte {int(labels[bad])} > 9")
    pixels = recs[:, 1:].reshape(-1, 3, 32, 32)
    return _from_bytes(pixels, labels, split_tag, {"source": source})


def load_cifar10_binary(path, split_tag: str = "train") -> ImageDataset:
    """Load one or more CIFAR-10 ``.bin`` files (a path or a list of paths)."""
    paths = [path] if isinstance(path, (str, Path)) else list(path)
    raw = b""
    for p in paths:
        chunk = Path(p).read_bytes()
        if len(chunk) % RECORD_BYTES:
            raise ValueError(f"{p}: truncated record, length {len(chunk)} not a multiple of {RECORD_BYTES}")
        raw += chunk
    ds = parse_cifar10_bytes(raw, split_tag)
    ds.provenance["files"] = [str(p) for p in paths]
    return ds


def cifar10_bytes(ds: ImageDataset) -> bytes:
    px = ds.to_bytes().reshape(len(ds), -1)
    recs = np.concatenate([ds.labels.numpy().astype(np.uint8)[:, None], px], axis=1)
    return recs.tobytes()


def save_cifar10_binary(ds: ImageDataset, path) -> None:
    Path(path).write_bytes(cifar10_bytes(ds))


# ---------------------------------------------------------------- PPM


def ppm_bytes(image) -> bytes:
    """Binary PPM (P6, maxval 255) for a ``[3,H,W]`` image in [0, 1]."""
    arr = image.detach().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    _, h, w = arr.shape
    px = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()


def read_ppm(path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode())
    pos += 1
    if tokens[0] != "P6" or tokens[3] != "255":
        raise ValueError(f"{path}: only P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    px = np.frombuffer(raw[pos:pos + 3 * w * h], dtype=np.uint8)
    if px.size != 3 * w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return torch.from_numpy(px.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


# ---------------------------------------------------------------- augmentation


class AugmentationRng(SplitMix64):
    pass


DRAWS_PER_VIEW = 7  # side, ox, oy, flip, jitter r/g/b


def apply_view(image: torch.Tensor, side: int, ox: int, oy: int, flip: bool, jitter) -> torch.Tensor:
    """Crop ``side`` px at (ox, oy), nearest-resize to 32, optional h-flip, channel jitter, clamp."""
    src = (np.arange(32) * side) // 32
    rows = torch.from_numpy(oy + src)
    cols = torch.from_numpy(ox + src)
    if flip:
        cols = cols.flip(0)
    out = image[:, rows][:, :, cols]
    j = torch.as_tensor(np.asarray(jitter, dtype=np.float32)).reshape(3, 1, 1)
    return (out * j).clamp(0.0, 1.0)


def _view_params(d: np.ndarray):
    side = int(bounded(int(d[0]), 24, 32))
    ox = int(bounded(int(d[1]), 0, 32 - side))
    oy = int(bounded(int(d[2]), 0, 32 - side))
    flip = bool(int(d[3]) & 1)
    jitter = 0.8 + 0.4 * unit_float(d[4:7])
    return side, ox, oy, flip, jitter


def augment_pair(image: torch.Tensor, rng: AugmentationRng):
    if tuple(image.shape) != IMAGE_SHAPE:
        raise ValueError(f"augment_pair expects a [3,32,32] image, got {tuple(image.shape)}")
    d = rng.take(2 * DRAWS_PER_VIEW)
    return (apply_view(image, *_view_params(d[:DRAWS_PER_VIEW])),
            apply_view(image, *_view_params(d[DRAWS_PER_VIEW:])))


def _batch_views(images: torch.Tensor, d: np.ndarray) -> torch.Tensor:
    n = images.shape[0]
    side = bounded(d[:, 0], 24, 32)
    ox = (d[:, 1] % (33 - side).astype(np.uint64)).astype(np.int64)
    oy = (d[:, 2] % (33 - side).astype(np.uint64)).astype(np.int64)
    flip = (d[:, 3] & np.uint64(1)).astype(bool)
    jitter = 0.8 + 0.4 * unit_float(d[:, 4:7])
    src = (np.arange(32)[None, :] * side[:, None]) // 32
    rows = oy[:, None] + src
    cols = ox[:, None] + src
    cols = np.where(flip[:, None], cols[:, ::-1], cols)
    r = torch.from_numpy(rows[:, :, None] * 32 + cols[:, None, :])
    flat = images.reshape(n, 3, 1024)
    gathered = flat.gather(2, r.reshape(n, 1, 1024).expand(n, 3, 1024)).reshape(n, 3, 32, 32)
    j = torch.from_numpy(jitter.astype(np.float32)).reshape(n, 3, 1, 1)
    return (gathered * j).clamp(0.0, 1.0)


def augment_batch(images: torch.Tensor, rng: AugmentationRng):
    """Vectorised ``augment_pair`` over a batch, consuming the stream in sample order."""
    n = images.shape[0]
    d = rng.take(n * 2 * DRAWS_PER_VIEW).reshape(n, 2, DRAWS_PER_VIEW)
    return _batch_views(images, d[:, 0]), _batch_views(images, d[:, 1])


# ---------------------------------------------------------------- batching


def shuffled_indices(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates permutation of ``range(n)`` driven by SplitMix64(seed)."""
    rng = SplitMix64(seed)
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = rng.randint(0, i)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def batch_iter(dataset, batch_size: int, epoch_seed: int = 0, shuffle: bool = False) -> Iterator[np.ndarray]:
    n = dataset if isinstance(dataset, int) else len(dataset)
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = shuffled_indices(n, epoch_seed) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]

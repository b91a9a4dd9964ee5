"""Dataset packaging and the synthetic shapes generator.

File format (SFDS, little-endian throughout):

    magic   4 bytes  b"SFDS"
    version u32      1
    classes u32
    h, w, c u32 each
    counts  classes * u32   examples per class
    names   classes * (u16 length + UTF-8 bytes)
    payload sum(counts) * h * w * c unsigned bytes,
            class-major, row-major, channel-last

The generator draws one parameterized convex polygon per class (side count,
filled or stroked, vertical aspect) at a random position, rotation, scale,
and color per example, then adds Gaussian pixel noise.  Colors are sampled
per example so class identity lives in geometry alone; foreground stays
brighter than background so silhouettes survive grayscale pooling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .checkpoint import FormatError
from .rng import Rng

MAGIC = b"SFDS"
VERSION = 1

SIDE_CHOICES = (3, 4, 5, 6, 7)
ASPECT_CHOICES = (1.0, 0.7, 0.45)
MAX_CLASSES = 2 * len(SIDE_CHOICES) * len(ASPECT_CHOICES)


@dataclass
class PackedDataset:
    """In-memory image corpus: uint8 pixels plus per-class bookkeeping."""

    h: int
    w: int
    c: int
    counts: tuple[int, ...]
    names: tuple[str, ...]
    payload: np.ndarray  # (total, h, w, c) uint8

    def __post_init__(self):
        self.counts = tuple(int(n) for n in self.counts)
        self.names = tuple(self.names)
        if len(self.names) != len(self.counts):
            raise ValueError(
                f"{len(self.names)} names for {len(self.counts)} classes"
            )
        if any(n < 1 for n in self.counts):
            raise ValueError("every class needs at least one example")
        expect = (sum(self.counts), self.h, self.w, self.c)
        if self.payload.dtype != np.uint8 or self.payload.shape != expect:
            raise ValueError(
                f"payload must be uint8 {expect}, got {self.payload.dtype} {self.payload.shape}"
            )

    @property
    def n_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return self.payload.shape[0]

    def labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_classes), self.counts)

    def class_examples(self, class_id: int) -> np.ndarray:
        """Global example ids belonging to one class (payload is class-major)."""
        start = int(sum(self.counts[:class_id]))
        return np.arange(start, start + self.counts[class_id])

    def images(self) -> np.ndarray:
        """Float pixels in [0, 1], layout (total, c, h, w) for the backbone."""
        return self.payload.astype(np.float64).transpose(0, 3, 1, 2) / 255.0

    def split(self, class_ids) -> dict[int, np.ndarray]:
        """Engine-style mapping: class id -> global example ids."""
        return {int(cid): self.class_examples(int(cid)) for cid in class_ids}

    def to_bytes(self) -> bytes:
        parts = [
            MAGIC,
            struct.pack("<5I", VERSION, self.n_classes, self.h, self.w, self.c),
            struct.pack(f"<{self.n_classes}I", *self.counts),
        ]
        for name in self.names:
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
        parts.append(self.payload.tobytes())
        return b"".join(parts)


@dataclass(frozen=True)
class SplitManifest:
    """Disjoint class-id lists for the three phases."""

    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...] = ()

    def __post_init__(self):
        groups = [tuple(self.train), tuple(self.val), tuple(self.test)]
        object.__setattr__(self, "train", groups[0])
        object.__setattr__(self, "val", groups[1])
        object.__setattr__(self, "test", groups[2])
        seen: set[int] = set()
        for ids in groups:
            if seen & set(ids):
                raise ValueError(f"split classes overlap: {sorted(seen & set(ids))}")
            seen |= set(ids)

    def restrict(self, ds: PackedDataset) -> None:
        bad = [c for c in self.train + self.val + self.test if not 0 <= c < ds.n_classes]
        if bad:
            raise ValueError(f"split names classes outside the dataset: {bad}")


def default_manifest(n_classes: int, val_classes: int = 5) -> SplitManifest:
    """First classes train, last `val_classes` validate; no test block."""
    if val_classes >= n_classes:
        raise ValueError(f"cannot hold out {val_classes} of {n_classes} classes")
    return SplitManifest(
        train=tuple(range(n_classes - val_classes)),
        val=tuple(range(n_classes - val_classes, n_classes)),
    )


# ----------------------------------------------------------------- file I/O


def save_dataset(path: str, ds: PackedDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(ds.to_bytes())


def parse_dataset(blob: bytes) -> PackedDataset:
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"truncated {what} at byte {off}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic at byte 0: not an SFDS file")
    version, n_classes, h, w, c = struct.unpack("<5I", take(20, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    counts = struct.unpack(f"<{n_classes}I", take(4 * n_classes, "class counts"))
    names = []
    for i in range(n_classes):
        (ln,) = struct.unpack("<H", take(2, f"name length {i}"))
        names.append(take(ln, f"name {i}").decode("utf-8"))
    expect = sum(counts) * h * w * c
    got = len(blob) - off
    if got != expect:
        raise FormatError(f"payload: expected {expect} bytes, got {got}")
    payload = np.frombuffer(take(expect, "payload"), dtype=np.uint8).reshape(
        sum(counts), h, w, c
    )
    return PackedDataset(h=h, w=w, c=c, counts=counts, names=tuple(names), payload=payload.copy())


def load_dataset(path: str) -> PackedDataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


# ---------------------------------------------------------------- generation


@dataclass(frozen=True)
class ShapeGenConfig:
    classes: int = 25
    per_class: int = 40
    size: int = 32
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.size < 16 or self.size % 16 != 0:
            raise ValueError(f"size must be >= 16 and divisible by 16, got {self.size}")
        if not 5 <= self.classes <= MAX_CLASSES:
            raise ValueError(
                f"classes must be in [5, {MAX_CLASSES}], got {self.classes}"
            )
        if self.per_class < 1:
            raise ValueError("per_class must be positive")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must be in [0, 1], got {self.noise}")


def class_recipe(class_id: int) -> tuple[int, bool, float]:
    """(sides, filled, aspect) for one class id; all ids below MAX_CLASSES differ."""
    filled = class_id % 2 == 0
    sides = SIDE_CHOICES[(class_id // 2) % len(SIDE_CHOICES)]
    aspect = ASPECT_CHOICES[(class_id // (2 * len(SIDE_CHOICES))) % len(ASPECT_CHOICES)]
    return sides, filled, aspect


def class_name(class_id: int) -> str:
    sides, filled, aspect = class_recipe(class_id)
    return f"{sides}gon-{'fill' if filled else 'stroke'}-a{aspect:g}"


def _polygon_vertices(sides, radius, aspect, angle, cx, cy) -> np.ndarray:
    theta = angle + 2 * np.pi * np.arange(sides) / sides
    verts = np.stack([cx + radius * np.cos(theta), cy + radius * aspect * np.sin(theta)], axis=1)
    return verts


def _convex_mask(size: int, verts: np.ndarray) -> np.ndarray:
    """Boolean inside-test for a convex polygon, consistent either winding."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    area = 0.0
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    sign = 1.0 if area > 0 else -1.0
    inside = np.ones((size, size), dtype=bool)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        inside &= sign * ((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)) >= 0
    return inside


def render_example(class_id: int, size: int, noise: float, rng: Rng) -> np.ndarray:
    """One (size, size, 3) float image in [0, 1]."""
    sides, filled, aspect = class_recipe(class_id)
    radius = rng.uniform(0.22, 0.34) * size
    angle = rng.uniform(-np.pi / 12, np.pi / 12)
    cx = (0.5 + rng.uniform(-0.12, 0.12)) * size
    cy = (0.5 + rng.uniform(-0.12, 0.12)) * size
    verts = _polygon_vertices(sides, radius, aspect, angle, cx, cy)
    mask = _convex_mask(size, verts)
    if not filled:
        hole = _polygon_vertices(sides, 0.62 * radius, aspect, angle, cx, cy)
        mask &= ~_convex_mask(size, hole)

    bg = rng.uniform(0.0, 0.35, (3,))
    fg = rng.uniform(0.55, 1.0, (3,))
    img = np.empty((size, size, 3))
    img[...] = bg
    img[mask] = fg
    if noise > 0:
        img = img + noise * rng.normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_shapes(cfg: ShapeGenConfig) -> PackedDataset:
    root = Rng(cfg.seed)
    total = cfg.classes * cfg.per_class
    payload = np.empty((total, cfg.size, cfg.size, 3), dtype=np.uint8)
    idx = 0
    for cid in range(cfg.classes):
        for _ in range(cfg.per_class):
            img = render_example(cid, cfg.size, cfg.noise, root.split(idx))
            payload[idx] = np.round(img * 255.0).astype(np.uint8)
            idx += 1
    return PackedDataset(
        h=cfg.size,
        w=cfg.size,
        c=3,
        counts=(cfg.per_class,) * cfg.classes,
        names=tuple(class_name(c) for c in range(cfg.classes)),
        payload=payload,
    )

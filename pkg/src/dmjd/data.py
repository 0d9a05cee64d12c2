"""Toy image datasets and the ``DMJD`` binary container."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

MAGIC = b"DMJD"
VERSION = 1
_HEADER = struct.Struct("<4sH5I")


@dataclass
class Dataset:
    images: np.ndarray                 # (M, H, W, C) uint8
    labels: np.ndarray | None = None   # (M,) uint16
    class_count: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        if self.images.ndim != 4:
            raise ParameterError(f"images must be (M, H, W, C), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint16)
            if self.labels.shape != (len(self.images),):
                raise ParameterError("one label per image required")
            if self.class_count < 1 or (len(self.labels) and int(self.labels.max()) >= self.class_count):
                raise ParameterError(f"labels must lie below class_count={self.class_count}")

    def __len__(self):
        return len(self.images)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.class_count)


def split_indices(n: int, seed: int, holdout: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/held-out split (sorted index arrays)."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * holdout))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# -- generation -----------------------------------------------------------------

def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def generate_toy_dataset(n_images: int, image_size: int = 32, class_count: int = 10, seed: int = 0) -> Dataset:
    """Procedural images whose class sets the grating orientation and tints the palette.

    Every image carries a sinusoidal grating at the class angle (random
    phase and period) over a background, plus a soft blob and pixel noise.
    Foreground colour mixes a class hue with a random colour, so colour
    alone is only a weak cue. Labels are balanced to within one image.
    """
    if n_images < 1 or image_size < 1 or class_count < 1:
        raise ParameterError("n_images, image_size and class_count must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_images) % class_count).astype(np.uint16)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    palette = [_hsv_to_rgb(c / class_count, 0.8, 0.9) for c in range(class_count)]
    images = np.empty((n_images, image_size, image_size, 3), dtype=np.uint8)
    for i, c in enumerate(labels):
        theta = np.pi * c / class_count + rng.normal(0.0, 0.04)
        period = rng.uniform(5.0, 9.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi / period * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        fg = 0.4 * palette[c] + 0.6 * rng.random(3)
        bg = 0.6 * rng.random(3)
        img = bg + wave[..., None] * (fg - bg)
        cy, cx = rng.uniform(0, image_size, size=2)
        radius = rng.uniform(2.5, 6.0)
        alpha = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))[..., None]
        img = (1 - alpha) * img + alpha * rng.random(3)
        img += rng.normal(0.0, 0.03, size=img.shape)
        images[i] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return Dataset(images, labels, class_count)


# -- binary container --------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    m, h, w, c = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, m, h, w, c, ds.class_count if ds.labeled else 0))
        fh.write(np.ascontiguousarray(ds.images).tobytes())
        if ds.labeled:
            fh.write(ds.labels.astype("<u2").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} of {_HEADER.size} bytes)")
    magic, version, m, h, w, c, classes = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    off = _HEADER.size
    per_image = h * w * c
    pix_bytes = m * per_image
    if len(raw) < off + pix_bytes:
        have = (len(raw) - off) // per_image if per_image else 0
        raise FormatError(f"{path}: truncated pixel block at offset {len(raw)}: "
                          f"declared {m} images, {have} present")
    images = np.frombuffer(raw, dtype=np.uint8, count=pix_bytes, offset=off).reshape(m, h, w, c).copy()
    off += pix_bytes
    labels = None
    if classes:
        if len(raw) < off + 2 * m:
            raise FormatError(f"{path}: truncated label block at offset {len(raw)}: "
                              f"declared {m} labels, {(len(raw) - off) // 2} present")
        labels = np.frombuffer(raw, dtype="<u2", count=m, offset=off).astype(np.uint16)
        bad = np.flatnonzero(labels >= classes)
        if bad.size:
            raise FormatError(f"{path}: label {int(labels[bad[0]])} >= class_count {classes} "
                              f"at offset {off + 2 * int(bad[0])}")
        off += 2 * m
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} unexpected trailing bytes at offset {off}")
    return Dataset(images, labels, classes)

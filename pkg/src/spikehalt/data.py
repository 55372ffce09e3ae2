"""Datasets: a deterministic synthetic shape task and the CIFAR binary format.

Images are kept as uint8 (N, C, H, W) so that writing and re-reading a file
is bit-exact; ``pixels`` gives the float view in [0, 1]. In-memory datasets
may also hold float pixels directly.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DataFormatError

IMAGE_SHAPE = (3, 32, 32)
PIXELS_PER_RECORD = 3 * 32 * 32
CIFAR10_RECORD = 1 + PIXELS_PER_RECORD
CIFAR100_RECORD = 2 + PIXELS_PER_RECORD

# synthetic task geometry, in pixels
_HALF_SIZE = (5.0, 12.0)
_JITTER = 7.0
_NOISE = 0.5
SHAPES = ("square", "circle", "triangle")


@dataclass
class Dataset:
    images: np.ndarray  # uint8 or float in [0, 1], (N, C, H, W)
    labels: np.ndarray  # int64 (N,)
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if self.images.dtype != np.uint8:
            if not np.issubdtype(self.images.dtype, np.floating):
                raise DataFormatError(f"images must be uint8 or float, got {self.images.dtype}")
            if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
                raise DataFormatError("float pixels must lie in [0, 1]")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def pixels(self) -> np.ndarray:
        return to_unit(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def to_unit(images: np.ndarray) -> np.ndarray:
    """float32 pixels in [0, 1] from uint8 or float images."""
    if images.dtype != np.uint8:
        return images.astype(np.float32)
    return images.astype(np.float32) / np.float32(255)


def gen_synthetic(n: int, seed: int) -> Dataset:
    """Filled square / circle / triangle on a uniform-noise background.

    Each shape gets a random centre, size and bright colour. Labels are a
    shuffled ``arange(n) % 3`` so class counts differ by at most one.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(SHAPES)
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:32, 0:32] + 0.5
    out = np.empty((n, 32, 32, 3), dtype=np.uint8)
    for i, c in enumerate(labels):
        s = rng.uniform(*_HALF_SIZE)
        cx, cy = 16 + rng.uniform(-_JITTER, _JITTER, 2)
        if c == 0:
            inside = (np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= s)
        elif c == 1:
            # radius chosen so the disc has about the square's area
            inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= (1.13 * s) ** 2
        else:
            top, bottom = cy - 1.2 * s, cy + 1.2 * s
            frac = (yy - top) / (bottom - top)
            inside = (frac >= 0) & (frac <= 1) & (np.abs(xx - cx) <= 1.3 * s * frac)
        background = rng.uniform(0, _NOISE, (32, 32, 3))
        colour = rng.uniform(0.6, 1.0, 3)
        img = np.where(inside[..., None], colour, background)
        out[i] = np.round(img * 255)
    return Dataset(out.transpose(0, 3, 1, 2).copy(), labels, len(SHAPES))


def _decode(raw: bytes, label_bytes: int, num_classes: int) -> Dataset:
    rec = label_bytes + PIXELS_PER_RECORD
    if len(raw) % rec:
        off = (len(raw) // rec) * rec
        raise DataFormatError(f"truncated record at offset {off}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(f"label byte {labels[i]} > {num_classes - 1} at offset {i * rec + label_bytes - 1}")
    images = arr[:, label_bytes:].reshape((-1,) + IMAGE_SHAPE).copy()
    return Dataset(images, labels, num_classes)


def load_cifar10_binary(path) -> Dataset:
    """Read 3073-byte records: one label byte, then the R, G and B planes (32x32, row-major)."""
    with open(path, "rb") as f:
        return _decode(f.read(), 1, 10)


def load_cifar100_binary(path) -> Dataset:
    """Same layout with a coarse and a fine label byte; the fine label is used."""
    with open(path, "rb") as f:
        return _decode(f.read(), 2, 100)


def encode_binary(ds: Dataset, label_bytes: int = 1) -> bytes:
    if ds.images.dtype != np.uint8:
        raise DataFormatError("binary records need uint8 pixels")
    if ds.images.shape[1:] != IMAGE_SHAPE:
        raise DataFormatError(f"binary records need {IMAGE_SHAPE} images, got {ds.images.shape[1:]}")
    if ds.labels.size and ds.labels.max() > 255:
        raise DataFormatError("labels do not fit in a byte")
    n = len(ds)
    rec = np.zeros((n, label_bytes + PIXELS_PER_RECORD), dtype=np.uint8)
    rec[:, label_bytes - 1] = ds.labels
    rec[:, label_bytes:] = ds.images.reshape(n, -1)
    return rec.tobytes()


def write_binary(ds: Dataset, path, label_bytes: int = 1) -> None:
    """Write ``ds`` in the CIFAR record layout (``label_bytes=2`` for the CIFAR-100 variant)."""
    data = encode_binary(ds, label_bytes)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of the [0, 1] pixels."""
    if not len(ds):
        raise ValueError("empty dataset")
    px = ds.pixels.astype(np.float64)
    mean = px.mean(axis=(0, 2, 3))
    std = px.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def normalize(pixels: np.ndarray, stats) -> np.ndarray:
    mean, std = (np.asarray(s, dtype=np.float32) for s in stats)
    return (pixels - mean[:, None, None]) / std[:, None, None]


def make_batches(ds: Dataset, batch: int, seed: int, normalize_with=None, epoch: int = 0,
                 shuffle: bool = True, flip: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x, y)`` float32/int64 batches; the last partial batch is kept.

    The order is a seeded permutation that depends on ``(seed, epoch)``.
    ``normalize_with`` is ``None`` (raw [0, 1] pixels), ``True`` (stats of ``ds``
    itself) or an explicit ``(mean, std)`` pair. ``flip`` mirrors a random half
    of each batch horizontally.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    if not len(ds):
        raise ValueError("empty dataset")
    stats = channel_stats(ds) if normalize_with is True else normalize_with
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(ds)) if shuffle else np.arange(len(ds))
    for start in range(0, len(ds), batch):
        idx = order[start:start + batch]
        x = to_unit(ds.images[idx])
        if flip:
            which = rng.random(len(idx)) < 0.5
            x[which] = x[which, :, :, ::-1]
        if stats is not None:
            x = normalize(x, stats)
        yield np.ascontiguousarray(x, dtype=np.float32), ds.labels[idx]

"""CIFAR-10 binary reader, synthetic stand-in data, augmentation."""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from ..errors import CorruptDataset
from .config import SyntheticSpec

RECORD_BYTES = 1 + 3 * 32 * 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
NUM_CLASSES = 10
DATA_ENV = "NORMLAB_DATA"


@dataclass
class Cifar10Set:
    """Images ``(N, 3, H, W)`` standardized per channel, integer labels, optional raw bytes."""

    images: np.ndarray
    labels: np.ndarray
    raw: Optional[np.ndarray] = None
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, n: Optional[int]) -> "Cifar10Set":
        if n is None or n >= len(self):
            return self
        raw = None if self.raw is None else self.raw[:n]
        return Cifar10Set(self.images[:n], self.labels[:n], raw, self.num_classes)


def parse_records(blob: bytes, source: str = "<bytes>") -> Tuple[np.ndarray, np.ndarray]:
    """Split a CIFAR-10 binary blob into labels ``(N,)`` and pixels ``(N, 3, 32, 32)``, both uint8."""
    if len(blob) == 0 or len(blob) % RECORD_BYTES:
        raise CorruptDataset(f"{source}: size {len(blob)} is not a positive multiple of {RECORD_BYTES}")
    rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].copy()
    if labels.max() >= NUM_CLASSES:
        bad = int(np.flatnonzero(labels >= NUM_CLASSES)[0])
        raise CorruptDataset(f"{source}: record {bad} has label {labels[bad]}")
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).copy()
    return labels, pixels


def serialize_records(labels: np.ndarray, pixels: np.ndarray) -> bytes:
    n = labels.shape[0]
    out = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = pixels.reshape(n, -1)
    return out.tobytes()


def read_cifar10_file(path) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    return parse_records(path.read_bytes(), str(path))


def resolve_data_dir(path=None) -> Path:
    """Explicit path, else ``$NORMLAB_DATA``; descends into ``cifar-10-batches-bin`` if present."""
    path = path or os.environ.get(DATA_ENV)
    if not path:
        raise FileNotFoundError(f"no CIFAR-10 directory given and ${DATA_ENV} is unset")
    p = Path(path)
    if (p / "cifar-10-batches-bin").is_dir():
        p = p / "cifar-10-batches-bin"
    missing = [f for f in TRAIN_FILES + TEST_FILES if not (p / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{p}: missing CIFAR-10 files {missing}")
    return p


def channel_stats(pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = pixels.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def standardize(pixels: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    x = pixels.astype(np.float64) / 255.0
    return ((x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)).astype(dtype)


def load_cifar10(path=None) -> Tuple[Cifar10Set, Cifar10Set]:
    """Train and test splits, both standardized with train-split channel statistics.

    Standardized images are kept in float32 to halve memory; batches are
    promoted to float64 when they enter the network.
    """
    d = resolve_data_dir(path)
    tr = [read_cifar10_file(d / f) for f in TRAIN_FILES]
    te = [read_cifar10_file(d / f) for f in TEST_FILES]
    tr_labels = np.concatenate([t[0] for t in tr])
    tr_pixels = np.concatenate([t[1] for t in tr])
    te_labels = np.concatenate([t[0] for t in te])
    te_pixels = np.concatenate([t[1] for t in te])
    mean, std = channel_stats(tr_pixels)
    train = Cifar10Set(standardize(tr_pixels, mean, std), tr_labels.astype(np.int64), tr_pixels)
    test = Cifar10Set(standardize(te_pixels, mean, std), te_labels.astype(np.int64), te_pixels)
    return train, test


def synthetic_dataset(spec: SyntheticSpec) -> Tuple[Cifar10Set, Cifar10Set]:
    """Gaussian-blob classes under white noise.

    Each class owns a colour (unit vector over the three channels) and a
    Gaussian blob at a fixed position; a sample is ``snr * template + noise``
    with unit-variance noise. ``snr=0`` leaves pure noise.
    """
    rng = np.random.default_rng(spec.seed)
    k, s = spec.num_classes, spec.image_size
    colors = rng.standard_normal((k, 3))
    colors /= np.linalg.norm(colors, axis=1, keepdims=True)
    centers = rng.uniform(0.25 * s, 0.75 * s, size=(k, 2))
    yy, xx = np.mgrid[0:s, 0:s]
    width = s / 4.0
    blobs = np.exp(-((yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2)
                   / (2 * width**2))
    blobs /= np.sqrt(np.mean(blobs**2, axis=(1, 2), keepdims=True))
    templates = colors[:, :, None, None] * blobs[:, None]

    def draw(per_class):
        labels = np.repeat(np.arange(k), per_class)
        labels = labels[rng.permutation(labels.size)]
        noise = rng.standard_normal((labels.size, 3, s, s))
        return Cifar10Set(spec.snr * templates[labels] + noise, labels.astype(np.int64), num_classes=k)

    train = draw(spec.train_per_class)
    test = draw(spec.test_per_class)
    return train, test


def augment(batch: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal mirror and a random shift of up to ``pad`` pixels with zero fill."""
    b, c, h, w = batch.shape
    flip = rng.random(b) < 0.5
    out = np.where(flip[:, None, None, None], batch[..., ::-1], batch)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=b)
    dx = rng.integers(0, 2 * pad + 1, size=b)
    res = np.empty_like(out)
    for i in range(b):
        res[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return res


def iterate_batches(data: Cifar10Set, batch_size: int, rng: Optional[np.random.Generator] = None,
                    aug: bool = False) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Float64 mini-batches; shuffled when ``rng`` is given."""
    n = len(data)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        xb = data.images[idx].astype(np.float64)
        if aug:
            xb = augment(xb, rng)
        yield xb, data.labels[idx]

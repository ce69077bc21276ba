"""Datasets: a built-in synthetic generator and a binary-file loader.

The synthetic task renders each class as a fixed mixture of smooth Gaussian
bumps (a distinct spatial template per class and channel), then draws samples
as brightness-jittered noisy copies. It is deliberately easy: the point is to
verify that every architecture can fit it quickly on a CPU, not to benchmark
accuracy.

On disk a dataset is a directory with `images.t4` (the rank-4 tensor binary
format) and `labels.u32` (little-endian: a uint32 count followed by that many
uint32 class labels).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor4

IMAGES_FILE = "images.t4"
LABELS_FILE = "labels.u32"


@dataclass
class Dataset:
    images: Tensor4
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.labels.ndim != 1 or len(self.labels) != self.images.shape.batch:
            raise ValueError("labels must be one integer per image")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


def _class_templates(rng, classes, channels, resolution, bumps=3):
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    templates = np.zeros((classes, channels, resolution, resolution))
    for cls in range(classes):
        for ch in range(channels):
            for _ in range(bumps):
                cy, cx = rng.uniform(0.15, 0.85, size=2) * resolution
                sigma = rng.uniform(0.10, 0.25) * resolution
                amp = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
                templates[cls, ch] += amp * np.exp(
                    -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)
                )
        templates[cls] /= np.sqrt((templates[cls] ** 2).mean()) + 1e-12
    return templates


def synthetic_blobs(
    samples: int = 5000,
    classes: int = 10,
    resolution: int = 32,
    channels: int = 3,
    noise: float = 0.3,
    seed: int = 0,
    split: str = "train",
    precision: str = "single",
) -> Dataset:
    """Balanced classification set: per-class smooth templates plus noise."""
    rng = np.random.default_rng((seed, 0xDA7A))
    templates = _class_templates(rng, classes, channels, resolution)
    labels = np.arange(samples) % classes
    rng.shuffle(labels)
    gain = 1.0 + 0.2 * rng.standard_normal(samples)[:, None, None, None]
    images = templates[labels] * gain + noise * rng.standard_normal(
        (samples, channels, resolution, resolution)
    )
    return Dataset(Tensor4(images, precision=precision), labels, classes, split)


def save_dataset(ds: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ds.images.save(directory / IMAGES_FILE)
    payload = struct.pack("<I", len(ds.labels)) + ds.labels.astype("<u4").tobytes()
    (directory / LABELS_FILE).write_bytes(payload)


def load_dataset(directory, num_classes: int | None = None, split: str = "train") -> Dataset:
    directory = Path(directory)
    images = Tensor4.load(directory / IMAGES_FILE)
    blob = (directory / LABELS_FILE).read_bytes()
    if len(blob) < 4:
        raise ValueError(f"{LABELS_FILE} shorter than its count header")
    (count,) = struct.unpack_from("<I", blob)
    labels = np.frombuffer(blob, dtype="<u4", offset=4)
    if len(labels) != count:
        raise ValueError(f"label count header says {count}, file holds {len(labels)}")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels, num_classes, split)


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None):
    """Yield (Tensor4, labels) minibatches; shuffled when an RNG is given."""
    order = np.arange(len(ds))
    if rng is not None:
        rng.shuffle(order)
    data = ds.images.data
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield Tensor4.wrap(np.ascontiguousarray(data[idx])), ds.labels[idx]

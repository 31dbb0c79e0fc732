"""Dataset loading: FashionMNIST / CIFAR10 via torchvision, plus a
procedural `synthetic` dataset so the full train/export/verify loop works in
offline environments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DatasetUnavailable(RuntimeError):
    """The requested dataset could not be fetched or found locally."""


@dataclass
class Split:
    x: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    y: np.ndarray  # (N,) int64

    @property
    def image_shape(self):
        return tuple(self.x.shape[1:])


@dataclass
class Dataset:
    name: str
    train: Split
    test: Split
    classes: int = 10


def _to_split(x, y) -> Split:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None, :, :]
    if x.max() > 1.5:
        x = x / 255.0
    return Split(x, np.asarray(y, dtype=np.int64))


def _torchvision_dataset(name: str, data_dir: str) -> Dataset:
    try:
        import torchvision
    except ImportError as e:
        raise DatasetUnavailable(f"torchvision not installed: {e}") from e
    try:
        if name == "fashionmnist":
            cls = torchvision.datasets.FashionMNIST
        else:
            cls = torchvision.datasets.CIFAR10
        train = cls(data_dir, train=True, download=True)
        test = cls(data_dir, train=False, download=True)
    except Exception as e:  # noqa: BLE001 - download/IO failures surface here
        raise DatasetUnavailable(f"could not fetch {name}: {e}") from e
    tx = np.asarray(train.data)
    ty = np.asarray(train.targets)
    sx = np.asarray(test.data)
    sy = np.asarray(test.targets)
    if name == "cifar10":
        tx = tx.transpose(0, 3, 1, 2)
        sx = sx.transpose(0, 3, 1, 2)
    return Dataset(name, _to_split(tx, ty), _to_split(sx, sy))


def _synthetic_image(rng: np.random.Generator, label: int, size: int = 28) -> np.ndarray:
    """One 10-class geometric pattern with positional jitter and noise."""
    img = np.zeros((size, size), dtype=np.float32)
    off = int(rng.integers(-3, 4))
    off2 = int(rng.integers(-3, 4))
    lo, hi = 10 + off, 18 + off
    lo2, hi2 = 10 + off2, 18 + off2
    c = size // 2
    if label == 0:  # horizontal bar
        img[lo:hi, 4:size - 4] = 1.0
    elif label == 1:  # vertical bar
        img[4:size - 4, lo:hi] = 1.0
    elif label == 2:  # cross
        img[lo:hi, 4:size - 4] = 1.0
        img[4:size - 4, lo2:hi2] = 1.0
    elif label == 3:  # top-left block
        img[2 + off:c + off, 2 + off2:c + off2] = 1.0
    elif label == 4:  # bottom-right block
        img[c + off:size - 2 + off, c + off2:size - 2 + off2] = 1.0
    elif label == 5:  # hollow ring
        img[4 + off:size - 4 + off, 4 + off2:size - 4 + off2] = 1.0
        img[8 + off:size - 8 + off, 8 + off2:size - 8 + off2] = 0.0
    elif label == 6:  # diagonal stripe
        for i in range(size):
            j = i + off
            img[i, max(0, j - 2):min(size, j + 3)] = 1.0
    elif label == 7:  # anti-diagonal stripe
        for i in range(size):
            j = size - 1 - i + off
            img[i, max(0, j - 2):min(size, j + 3)] = 1.0
    elif label == 8:  # two horizontal bars
        img[5 + off:9 + off, 3:size - 3] = 1.0
        img[size - 9 + off:size - 5 + off, 3:size - 3] = 1.0
    else:  # checker blocks
        img[4 + off:c + off, 4 + off2:c + off2] = 1.0
        img[c + off:size - 4 + off, c + off2:size - 4 + off2] = 1.0
    img = np.roll(img, 0, axis=0)
    img *= float(rng.uniform(0.7, 1.0))
    img += rng.normal(scale=0.10, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _synthetic(seed: int, n_train: int = 4000, n_test: int = 1000) -> Dataset:
    rng = np.random.default_rng(seed)

    def make(n):
        xs = np.zeros((n, 1, 28, 28), np.float32)
        ys = np.zeros(n, np.int64)
        for i in range(n):
            label = i % 10
            xs[i, 0] = _synthetic_image(rng, label)
            ys[i] = label
        perm = rng.permutation(n)
        return Split(xs[perm], ys[perm])

    return Dataset("synthetic", make(n_train), make(n_test))


def load_dataset(name: str, data_dir: str = "data", seed: int = 0) -> Dataset:
    """``fashionmnist`` / ``cifar10`` (torchvision, downloads or reads a
    local copy under ``data_dir``) or ``synthetic`` (offline)."""
    name = name.lower()
    if name == "synthetic":
        return _synthetic(seed)
    if name in ("fashionmnist", "cifar10"):
        return _torchvision_dataset(name, data_dir)
    raise ValueError(f"unknown dataset '{name}'")

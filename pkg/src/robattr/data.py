"""Datasets: IDX files, synthetic 2-D sets, and a stratified MNIST subset builder."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Sample

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    name: str = "dataset"
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) == 0:
            raise ValueError("dataset is empty")
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if self.num_classes is None:
            self.num_classes = int(self.y.max()) + 1
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_shape(self) -> tuple:
        return self.x.shape[1:]

    @property
    def samples(self) -> list[Sample]:
        return [Sample(xi, int(yi)) for xi, yi in zip(self.x, self.y)]

    def take(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.name, self.split, self.num_classes)

    def flat(self) -> "Dataset":
        return Dataset(self.x.reshape(len(self), -1), self.y, self.name, self.split, self.num_classes)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int) -> np.ndarray:
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise IdxError(f"{path}: file too short for an IDX header")
    got = struct.unpack(">I", data[:4])[0]
    if got != magic:
        raise IdxError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxError(f"{path}: truncated header, expected {header} bytes, got {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = header + int(np.prod(dims))
    if len(data) != expected:
        raise IdxError(f"{path}: expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx", split: str = "train") -> Dataset:
    """Load an IDX image/label pair (optionally gzipped); pixels are scaled by 1/255."""
    images = _read_idx(images_path, IMAGES_MAGIC)
    labels = _read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), name, split,
                   num_classes=10)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data as IDX; 3-D arrays are images, 1-D arrays are labels."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IdxError("IDX payload must be uint8")
    magic = {3: IMAGES_MAGIC, 1: LABELS_MAGIC}.get(array.ndim)
    if magic is None:
        raise IdxError("IDX writer handles 3-D images or 1-D labels")
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


# -- synthetic ------------------------------------------------------------------------

def synth_dataset(kind: str, n: int, seed: int = 0) -> Dataset:
    """Small labeled 2-D sets in [0, 1]^2.

    ``two_gaussians`` is linearly separable (a gap separates the classes);
    ``xor_grid`` puts the four quadrant clusters in an XOR labeling.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    if kind == "two_gaussians":
        centers = np.array([[0.3, 0.3], [0.7, 0.7]])
        x = centers[y] + rng.normal(0.0, 0.06, size=(n, 2))
        # keep the classes strictly separated by the diagonal
        proj = (x - 0.5).sum(axis=1)
        sign = np.where(y == 1, 1.0, -1.0)
        fix = sign * proj < 0.05
        x[fix] += (sign[fix] * (0.05 - sign[fix] * proj[fix]) / 2)[:, None]
    elif kind == "xor_grid":
        quad = rng.integers(0, 2, size=(n, 2))
        y = quad[:, 0] ^ quad[:, 1]
        x = 0.25 + 0.5 * quad + rng.uniform(-0.15, 0.15, size=(n, 2))
    else:
        raise ValueError(f"unknown synthetic dataset {kind!r}")
    return Dataset(np.clip(x, 0.0, 1.0), y, kind, "train", num_classes=2)


# -- MNIST subset -------------------------------------------------------------------

def mnist_subset_from_csv(csv_path, out_dir, n_train: int = 2000, n_test: int = 500,
                          seed: int = 0) -> dict[str, Path]:
    """Split a CSV of MNIST digits (784 pixel columns, then the label) into IDX files.

    The split is stratified by class and seeded.  Files are written as
    ``train-images-idx3-ubyte`` and friends under ``out_dir``.
    """
    raw = np.loadtxt(csv_path, delimiter=",", dtype=np.int64)
    pixels, labels = raw[:, :784].astype(np.uint8), raw[:, 784].astype(np.uint8)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    train_idx, test_idx = [], []
    per_train, per_test = n_train // len(classes), n_test // len(classes)
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        if idx.size < per_train + per_test:
            raise ValueError(f"class {c} has only {idx.size} examples")
        train_idx.append(idx[:per_train])
        test_idx.append(idx[per_train:per_train + per_test])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, parts in (("train", train_idx), ("test", test_idx)):
        idx = rng.permutation(np.concatenate(parts))
        img, lab = out / f"{split}-images-idx3-ubyte", out / f"{split}-labels-idx1-ubyte"
        write_idx(img, pixels[idx].reshape(-1, 28, 28))
        write_idx(lab, labels[idx])
        paths[f"{split}_images"], paths[f"{split}_labels"] = img, lab
    return paths

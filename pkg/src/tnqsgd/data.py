"""Datasets: MNIST IDX files, a synthetic Laplace-gradient regression task,
and client partitioning."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, InvalidParameterError, LengthError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """``labels`` holds integer class ids for classification tasks and a
    float ``n x k`` target matrix for regression tasks."""

    features: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise InvalidParameterError("features must be an n x d matrix")
        if len(self.labels) != len(self.features):
            raise InvalidParameterError("features and labels differ in length")
        if not np.all(np.isfinite(self.features)):
            raise InvalidParameterError("features contain non-finite values")

    def __len__(self):
        return len(self.features)

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(np.asarray(self.labels).dtype, np.integer)

    @property
    def num_classes(self) -> int:
        return int(np.max(self.labels)) + 1 if self.is_classification else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.name)


@dataclass
class Partition:
    shards: list

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.shards])

    @property
    def weights(self) -> np.ndarray:
        sizes = self.sizes
        return sizes / sizes.sum()


@dataclass
class SynthTask:
    dataset: Dataset
    optimum: np.ndarray  # least-squares minimizer, shape (1, d)
    center: np.ndarray  # generating mean
    gamma: float
    min_loss: float


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise LengthError(f"{what}: expected {n} bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path, name="mnist") -> Dataset:
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x}")
        pixels = np.frombuffer(_read_exact(f, count * rows * cols, "image data"), dtype=np.uint8)
    with open(labels_path, "rb") as f:
        magic, nlab = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x}")
        labels = np.frombuffer(_read_exact(f, nlab, "label data"), dtype=np.uint8)
    if nlab != count:
        raise FormatError(f"{count} images but {nlab} labels")
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), name)


def write_idx(images_path, labels_path, images, labels):
    """Write ``images`` (n x rows x cols uint8) and ``labels`` (n uint8) as IDX."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def mnist_5k(directory):
    """Write the 5,000-image MNIST subset bundled with ``mlxtend`` as IDX files.

    Returns the ``(images, labels)`` paths.  Requires the optional ``mlxtend``
    dependency; nothing is downloaded.
    """
    from pathlib import Path

    from mlxtend.data import mnist_data

    X, y = mnist_data()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img, lab = directory / "mnist5k-images-idx3-ubyte", directory / "mnist5k-labels-idx1-ubyte"
    write_idx(img, lab, X.reshape(-1, 28, 28).astype(np.uint8), y)
    return img, lab


def synth_laplace_task(d: int, n: int, gamma: float, rng, signal: float = 0.0) -> SynthTask:
    """Least-squares task whose per-sample gradients have Laplace coordinates.

    Each sample has a single constant feature and a ``d``-dimensional target
    ``center + r_i`` with ``r_i`` i.i.d. Laplace(0, gamma).  A bias-free
    linear map ``w`` (shape ``1 x d``) minimizes ``0.5 * mean ||w - y_i||^2``.
    With the default ``signal=0`` the center is the origin, so at the zero
    initialization every per-sample gradient is exactly ``-r_i``.  A positive
    ``signal`` places the center at Laplace(0, signal) quantiles, randomly
    permuted, which makes the full gradient at the origin Laplace-shaped.
    """
    if d < 1 or n < 1:
        raise InvalidParameterError("d and n must be >= 1")
    if not gamma > 0 or signal < 0:
        raise InvalidParameterError("need gamma > 0 and signal >= 0")
    from .laplace import LaplaceModel, laplace_sample

    center = np.zeros(d)
    if signal > 0:
        q = (np.arange(d) + 0.5) / d
        center = rng.permutation(signal * np.where(q < 0.5, np.log(2 * q), -np.log(2 * (1 - q))))
    resid = laplace_sample(LaplaceModel(gamma), rng, n * d).reshape(n, d)
    targets = center[None, :] + resid
    optimum = targets.mean(axis=0, keepdims=True)
    min_loss = 0.5 * float(np.mean(np.sum((targets - optimum) ** 2, axis=1)))
    ds = Dataset(np.ones((n, 1)), targets, "synthetic-laplace")
    return SynthTask(ds, optimum, center, gamma, min_loss)


def separable_2d(n: int, rng, margin: float = 0.5) -> Dataset:
    """Two linearly separable Gaussian blobs in the plane."""
    y = rng.integers(0, 2, n)
    X = rng.normal(size=(n, 2))
    X[:, 0] += np.where(y == 1, 1.0, -1.0) * (2.0 + margin)
    X[:, 0] = np.where(y == 1, np.maximum(X[:, 0], margin), np.minimum(X[:, 0], -margin))
    return Dataset(X, y.astype(np.int64), "separable-2d")


def partition(ds: Dataset, N: int, mode: str = "iid_equal", rng=None, weights: Sequence[float] | None = None):
    n = len(ds)
    if N < 1 or N > n:
        raise ConfigurationError(f"cannot split {n} samples across {N} clients")
    rng = np.random.default_rng(0) if rng is None else rng
    perm = rng.permutation(n)
    if mode == "iid_equal":
        return Partition([np.sort(s) for s in np.array_split(perm, N)])
    if mode == "iid_sized":
        if weights is None or len(weights) != N:
            raise ConfigurationError("iid_sized needs one weight per client")
        w = np.asarray(weights, dtype=float)
        if np.any(w <= 0):
            raise ConfigurationError("client weights must be positive")
        w = w / w.sum()
        sizes = np.floor(w * n).astype(int)
        # hand leftovers to the largest fractional parts, keep every shard nonempty
        rem = n - sizes.sum()
        order = np.argsort(-(w * n - sizes), kind="stable")
        sizes[order[:rem]] += 1
        if np.any(sizes == 0):
            raise ConfigurationError("a client weight is too small for the dataset size")
        cuts = np.cumsum(sizes)[:-1]
        return Partition([np.sort(s) for s in np.split(perm, cuts)])
    raise ConfigurationError(f"unknown partition mode {mode!r}")


def export_csv(ds: Dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        nf = ds.features.shape[1]
        labels = np.asarray(ds.labels)
        nl = 1 if labels.ndim == 1 else labels.shape[1]
        w.writerow([f"x{j}" for j in range(nf)] + (["label"] if nl == 1 else [f"y{j}" for j in range(nl)]))
        for x, y in zip(ds.features, labels):
            w.writerow([repr(float(v)) for v in x] + ([y.item()] if nl == 1 else [repr(float(v)) for v in y]))

"""Datasets: synthetic class-template data, IDX files, and partitioning.

Inputs are float64 arrays shaped (N, C, H, W) with values in [0, 1];
labels are int64 class indices.  The IDX reader/writer speaks the
classic big-endian format (magic 2051 for uint8 image cubes, 2049 for
uint8 label vectors) and transparently handles gzip-compressed files.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import IdxFormatError

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


@dataclass(frozen=True)
class Dataset:
    """A labelled set of image tensors."""

    inputs: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 4:
            raise ValueError(f"inputs must be (N, C, H, W), got shape {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ValueError(
                f"labels shape {labels.shape} does not match {inputs.shape[0]} inputs"
            )
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if inputs.size:
            lo, hi = inputs.min(), inputs.max()
            if not np.isfinite([lo, hi]).all() or lo < 0.0 or hi > 1.0:
                raise ValueError(f"inputs must lie in [0, 1], got range [{lo}, {hi}]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes)


def gen_synthetic(
    num_classes: int,
    samples_per_class: int,
    input_shape: tuple[int, int, int],
    seed: int,
    noise: float = 0.15,
) -> Dataset:
    """Class-template data: one uniform template per class plus Gaussian
    noise, clipped back to [0, 1].  Samples are emitted class-major.
    """
    if num_classes < 1 or samples_per_class < 1:
        raise ValueError("num_classes and samples_per_class must be positive")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    templates = rng.uniform(0.0, 1.0, (num_classes, c, h, w))
    inputs = np.empty((num_classes * samples_per_class, c, h, w))
    labels = np.empty(num_classes * samples_per_class, dtype=np.int64)
    for k in range(num_classes):
        block = slice(k * samples_per_class, (k + 1) * samples_per_class)
        jitter = rng.normal(0.0, noise, (samples_per_class, c, h, w))
        inputs[block] = np.clip(templates[k] + jitter, 0.0, 1.0)
        labels[block] = k
    return Dataset(inputs, labels, num_classes)


def split_per_class(dataset: Dataset, train_per_class: int) -> tuple[Dataset, Dataset]:
    """Per class, the first ``train_per_class`` samples go to the train
    split and the rest to the test split."""
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for k in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == k)
        if len(members) <= train_per_class:
            raise ValueError(
                f"class {k} has {len(members)} samples, needs more than {train_per_class}"
            )
        train_idx.append(members[:train_per_class])
        test_idx.append(members[train_per_class:])
    return (
        dataset.subset(np.concatenate(train_idx)),
        dataset.subset(np.concatenate(test_idx)),
    )


def _open_maybe_gzip(path: str):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path: str) -> np.ndarray:
    """One IDX file as a uint8 array: (N, H, W) for images, (N,) labels."""
    with _open_maybe_gzip(path) as f:
        header = f.read(4)
        if len(header) < 4:
            raise IdxFormatError(f"{path}: truncated magic")
        magic = struct.unpack(">I", header)[0]
        if magic == IMAGES_MAGIC:
            ndims = 3
        elif magic == LABELS_MAGIC:
            ndims = 1
        else:
            raise IdxFormatError(f"{path}: bad magic {magic} (expected 2051 or 2049)")
        raw_dims = f.read(4 * ndims)
        if len(raw_dims) < 4 * ndims:
            raise IdxFormatError(f"{path}: truncated dimension header")
        dims = struct.unpack(">" + "I" * ndims, raw_dims)
        count = int(np.prod(dims))
        data = f.read(count)
        if len(data) < count:
            raise IdxFormatError(f"{path}: expected {count} data bytes, got {len(data)}")
        if f.read(1):
            raise IdxFormatError(f"{path}: trailing bytes after {count} data bytes")
    return np.frombuffer(data, dtype=np.uint8).reshape(dims)


def write_idx(path: str, array: np.ndarray, compress: bool = False) -> None:
    """Write a uint8 array as IDX: 3-d arrays as images, 1-d as labels."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError(f"IDX payload must be uint8, got {array.dtype}")
    if array.ndim == 3:
        magic = IMAGES_MAGIC
    elif array.ndim == 1:
        magic = LABELS_MAGIC
    else:
        raise ValueError(f"IDX arrays must be 1-d or 3-d, got {array.ndim}-d")
    header = struct.pack(">I", magic) + struct.pack(
        ">" + "I" * array.ndim, *array.shape
    )
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(header)
        f.write(array.tobytes())


def load_idx(images_path: str, labels_path: str, num_classes: int | None = None) -> Dataset:
    """Paired IDX image/label files as a Dataset (pixels scaled by 1/255)."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: not an image file")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: not a label file")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    inputs = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(inputs, labels.astype(np.int64), num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a training set across clients.

    ``scheme`` is ``iid`` or ``label_skew``; the latter draws per-class
    client proportions from Dirichlet(alpha), lower alpha = more skew.
    """

    scheme: str
    num_clients: int
    seed: int
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if self.scheme not in ("iid", "label_skew"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be positive, got {self.num_clients}")
        if self.scheme == "label_skew" and self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


def partition(dataset: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split a dataset into disjoint, covering, nonempty client shards."""
    n = len(dataset)
    if n < spec.num_clients:
        raise ValueError(f"cannot split {n} samples across {spec.num_clients} clients")
    rng = np.random.default_rng(spec.seed)
    if spec.scheme == "iid":
        order = rng.permutation(n)
        chunks = np.array_split(order, spec.num_clients)
        return [dataset.subset(np.sort(chunk)) for chunk in chunks]

    # label_skew: per class, split its samples by Dirichlet proportions.
    # Rare empty shards are retried with fresh draws.
    for _ in range(100):
        assigned: list[list[np.ndarray]] = [[] for _ in range(spec.num_clients)]
        for k in range(dataset.num_classes):
            members = np.flatnonzero(dataset.labels == k)
            if members.size == 0:
                continue
            members = rng.permutation(members)
            props = rng.dirichlet([spec.alpha] * spec.num_clients)
            bounds = np.floor(np.cumsum(props) * members.size).astype(int)
            bounds[-1] = members.size
            prev = 0
            for c, bound in enumerate(bounds):
                if bound > prev:
                    assigned[c].append(members[prev:bound])
                prev = bound
        if all(parts for parts in assigned):
            return [
                dataset.subset(np.sort(np.concatenate(parts))) for parts in assigned
            ]
    raise ValueError(
        f"label_skew(alpha={spec.alpha}) kept producing empty shards for "
        f"{spec.num_clients} clients; use more data or higher alpha"
    )


def round_subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """The per-round training slice: a random fraction of the shard,
    at least one sample; fraction 1 returns the shard itself."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return dataset
    n = len(dataset)
    take = max(1, int(round(fraction * n)))
    rng = np.random.default_rng(seed)
    return dataset.subset(rng.permutation(n)[:take])

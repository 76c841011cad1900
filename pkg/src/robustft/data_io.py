"""Datasets: IDX ingestion, synthetic clusters, transfer splits and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DATA_DIR = Path(__file__).parent / "data"
DIGITS_IMAGES = DATA_DIR / "digits-images-idx3-ubyte"
DIGITS_LABELS = DATA_DIR / "digits-labels-idx1-ubyte"


class DataError(ValueError):
    """Raised for malformed or inconsistent dataset input."""


@dataclass(frozen=True, eq=False)
class ImageDataset:
    images: np.ndarray  # [N, C, H, W], float64 in [0, 1]
    labels: np.ndarray  # [N], int64 in [0, num_classes)
    num_classes: int
    ids: np.ndarray = field(default=None)  # stable example ids from the original corpus

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got shape {images.shape}")
        n = images.shape[0]
        if n == 0:
            raise DataError("dataset is empty")
        if labels.shape != (n,):
            raise DataError(f"{n} images but labels have shape {labels.shape}")
        if images.min() < 0.0 or images.max() > 1.0:
            raise DataError("pixels must lie in [0, 1]")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (n,):
            raise DataError("ids must have one entry per example")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "ImageDataset":
        index = np.asarray(index)
        return ImageDataset(self.images[index], self.labels[index], self.num_classes, self.ids[index])

    def head(self, n: int | None) -> "ImageDataset":
        if n is None or n >= len(self):
            return self
        return self.subset(np.arange(n))


@dataclass(frozen=True)
class TransferSplit:
    source: ImageDataset
    target_train: ImageDataset
    target_test: ImageDataset


@dataclass(frozen=True)
class SynthSpec:
    n_per_class: int = 100
    dims: tuple[int, int, int] = (1, 8, 8)
    num_classes: int = 10
    cluster_separation: float = 0.8
    noise_sigma: float = 0.1
    seed: int = 0
    # >0: templates are random mixtures of a shared basis, so features transfer across classes
    n_basis: int = 0


# ---------------------------------------------------------------- IDX


def _read_header(buf: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise DataError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise DataError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4:need])


def load_idx(images_path, labels_path, num_classes: int | None = None) -> ImageDataset:
    """Load an IDX image/label pair (MNIST layout). Pixels are scaled by 1/255."""
    try:
        ibuf = Path(images_path).read_bytes()
        lbuf = Path(labels_path).read_bytes()
    except OSError as exc:
        raise DataError(str(exc)) from exc
    n, h, w = _read_header(ibuf, IMAGES_MAGIC, 3, images_path)
    (nl,) = _read_header(lbuf, LABELS_MAGIC, 1, labels_path)
    if len(ibuf) != 16 + n * h * w:
        raise DataError(f"{images_path}: expected {n * h * w} pixel bytes, found {len(ibuf) - 16}")
    if len(lbuf) != 8 + nl:
        raise DataError(f"{labels_path}: expected {nl} label bytes, found {len(lbuf) - 8}")
    if n != nl:
        raise DataError(f"{n} images but {nl} labels")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return ImageDataset(pixels.astype(np.float64) / 255.0, labels, k)


def save_idx(data: ImageDataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as IDX; pixels are rounded to multiples of 1/255."""
    n, c, h, w = data.images.shape
    if c != 1:
        raise DataError("IDX images are single-channel")
    if data.num_classes > 256:
        raise DataError("IDX labels are single bytes")
    pixels = np.rint(data.images[:, 0] * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", LABELS_MAGIC, n) + data.labels.astype(np.uint8).tobytes()
    )


def load_digits_idx() -> ImageDataset:
    """The bundled 8x8 handwritten digits corpus (1797 images, 10 classes)."""
    return load_idx(DIGITS_IMAGES, DIGITS_LABELS, num_classes=10)


# ---------------------------------------------------------------- synthetic


def synth_clusters(spec: SynthSpec) -> ImageDataset:
    """Gaussian clusters around one random template per class, clamped to [0, 1]."""
    if spec.n_per_class < 1 or spec.num_classes < 2:
        raise DataError("need n_per_class >= 1 and num_classes >= 2")
    if spec.cluster_separation <= 0 or spec.noise_sigma < 0:
        raise DataError("cluster_separation must be positive and noise_sigma non-negative")
    rng = np.random.default_rng(spec.seed)
    d = int(np.prod(spec.dims))
    k = spec.num_classes
    if spec.n_basis > 0:
        basis = rng.standard_normal((spec.n_basis, d))
        codes = rng.standard_normal((k, spec.n_basis))
        offsets = codes @ basis
        # match the per-pixel spread of U(-1/2, 1/2)
        offsets *= np.sqrt(1.0 / 12.0) / offsets.std(axis=1, keepdims=True)
    else:
        offsets = rng.uniform(-0.5, 0.5, size=(k, d))
    templates = np.clip(0.5 + spec.cluster_separation * offsets, 0.0, 1.0)
    labels = np.repeat(np.arange(k), spec.n_per_class)
    noise = rng.standard_normal((labels.size, d)) * spec.noise_sigma
    images = np.clip(templates[labels] + noise, 0.0, 1.0)
    return ImageDataset(images.reshape((labels.size,) + tuple(spec.dims)), labels, k)


# ---------------------------------------------------------------- splits and batches


def class_split(
    data: ImageDataset,
    source_classes,
    target_classes,
    test_fraction: float,
    seed: int,
) -> TransferSplit:
    """Build a pretrain/downstream split from disjoint class subsets.

    Classes are relabeled to contiguous indices in sorted order. Only the
    target task is split into train/test.
    """
    src = sorted(set(int(c) for c in source_classes))
    tgt = sorted(set(int(c) for c in target_classes))
    if not src or not tgt:
        raise DataError("class sets must be nonempty")
    if set(src) & set(tgt):
        raise DataError(f"source and target classes overlap: {sorted(set(src) & set(tgt))}")
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie in (0, 1)")
    for c in src + tgt:
        if not 0 <= c < data.num_classes:
            raise DataError(f"class {c} not in dataset")

    def relabel(classes):
        idx = np.flatnonzero(np.isin(data.labels, classes))
        remap = np.full(data.num_classes, -1)
        remap[classes] = np.arange(len(classes))
        return ImageDataset(data.images[idx], remap[data.labels[idx]], len(classes), data.ids[idx])

    source = relabel(src)
    target_train, target_test = holdout(relabel(tgt), test_fraction, seed)
    return TransferSplit(source, target_train, target_test)


def holdout(data: ImageDataset, test_fraction: float, seed: int) -> tuple[ImageDataset, ImageDataset]:
    """Seeded random train/test split; both parts keep the original order."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(data))
    n_test = max(1, int(round(test_fraction * len(data))))
    if n_test >= len(data):
        raise DataError("test_fraction leaves no training examples")
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


def batches(data: ImageDataset, batch_size: int, shuffle_seed=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split into (images, labels) batches; the final partial batch is kept.

    ``shuffle_seed`` may be an int or a sequence of ints (e.g. ``(seed, epoch)``).
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    n = len(data)
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    return [
        (data.images[order[i:i + batch_size]], data.labels[order[i:i + batch_size]])
        for i in range(0, n, batch_size)
    ]

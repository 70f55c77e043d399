"""Datasets, loaders, per-epoch shuffling, batching and pad-crop-flip augmentation.

Every random draw comes from a numpy Philox stream keyed by
``(seed, stream, epoch)``, so shuffling and augmentation are independent of
each other and of call order.
"""
from __future__ import annotations

import math
import os
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

STREAM_SHUFFLE = 2
STREAM_AUGMENT = 3
STREAM_DATA = 4

SPIRAL_TURNS = 1.5

CIFAR10_RECORD = 1 + 3072
CIFAR100_RECORD = 2 + 3072

_IDX_DTYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def stream(seed: int, stream_id: int, epoch: int = 0) -> np.random.Generator:
    """Counter-based generator for one ``(seed, stream, epoch)`` key."""
    key = np.random.SeedSequence([seed & (2**64 - 1), stream_id, epoch])
    return np.random.Generator(np.random.Philox(key))


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    ids: np.ndarray = field(init=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if n == 0:
            raise ValidationError("dataset is empty")
        if len(self.features) != n:
            raise ValidationError(f"{len(self.features)} feature rows but {n} labels")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.size:
            raise ValidationError(f"label {self.labels[bad[0]]} of sample {bad[0]} outside [0, {self.num_classes})")
        self.ids = np.arange(n)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.features.shape[1:]

    def to_csv(self, path: str | os.PathLike) -> None:
        flat = self.features.reshape(len(self), -1)
        lines = [",".join(repr(float(v)) for v in row) + f",{int(y)}" for row, y in zip(flat, self.labels)]
        Path(path).write_text("\n".join(lines) + "\n")


def spiral_point(t: float | np.ndarray, cls: int, classes: int):
    """Noise-free position at arm parameter ``t`` in [0, 1] for arm ``cls``."""
    angle = 2 * math.pi * cls / classes + 2 * math.pi * SPIRAL_TURNS * t
    return t * np.cos(angle), t * np.sin(angle)


def gen_spiral(n_per_class: int, classes: int, noise_std: float, seed: int) -> LabeledDataset:
    """Interleaved 2-D spiral arms; radius grows linearly with the arm parameter."""
    if n_per_class < 1 or classes < 2:
        raise ValidationError(f"need n_per_class >= 1 and classes >= 2, got {n_per_class}, {classes}")
    if noise_std < 0:
        raise ValidationError(f"noise_std must be >= 0, got {noise_std}")
    rng = stream(seed, STREAM_DATA)
    feats, labels = [], []
    for k in range(classes):
        t = rng.uniform(0.0, 1.0, n_per_class)
        x, y = spiral_point(t, k, classes)
        pts = np.stack([x, y], axis=1)
        if noise_std:
            pts = pts + rng.normal(0.0, noise_std, pts.shape)
        feats.append(pts)
        labels.append(np.full(n_per_class, k))
    return LabeledDataset(np.concatenate(feats), np.concatenate(labels), classes)


def _normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    x = pixels.astype(np.float64) / 255.0
    c = x.shape[1]
    mean = np.broadcast_to(np.asarray(mean if mean is not None else 0.0, dtype=np.float64), (c,))
    std = np.broadcast_to(np.asarray(std if std is not None else 1.0, dtype=np.float64), (c,))
    return (x - mean[None, :, None, None]) / std[None, :, None, None]


def load_cifar_binary(
    paths: str | os.PathLike | Sequence[str | os.PathLike],
    variant: str = "cifar10",
    mean=None,
    std=None,
) -> LabeledDataset:
    """Read one or more CIFAR-10/100 binary batch files.

    CIFAR-100 records carry (coarse, fine) label bytes; the fine label is used.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    if variant == "cifar10":
        record, n_label, classes = CIFAR10_RECORD, 1, 10
    elif variant == "cifar100":
        record, n_label, classes = CIFAR100_RECORD, 2, 100
    else:
        raise ValidationError(f"unknown CIFAR variant {variant!r}")
    blocks = []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) == 0 or len(raw) % record:
            raise FormatError(f"{p}: {len(raw)} bytes is not a multiple of the {record}-byte {variant} record")
        blocks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, record))
    data = np.concatenate(blocks)
    labels = data[:, n_label - 1].astype(np.int64)
    pixels = data[:, n_label:].reshape(-1, 3, 32, 32)
    return LabeledDataset(_normalize(pixels, mean, std), labels, classes)


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise FormatError(f"{path}: bad IDX magic {raw[:4].hex()}")
    dtype, ndim = _IDX_DTYPES[raw[2]], raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = tuple(int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, dims {dims} need {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, mean=None, std=None) -> LabeledDataset:
    """Read an IDX image/label pair; (N, h, w) images become N x 1 x h x w."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path).astype(np.int64)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise FormatError(f"{images_path}: expected 3 or 4 IDX dimensions, got {images.ndim}")
    if labels.ndim != 1 or len(labels) != len(images):
        raise FormatError(f"{labels_path}: {labels.shape} labels for {len(images)} images")
    if images.dtype == np.uint8:
        features = _normalize(images, mean, std)
    else:
        features = images.astype(np.float64)
    classes = num_classes if num_classes is not None else max(2, int(labels.max()) + 1)
    return LabeledDataset(features, labels, classes)


# ---------------------------------------------------------------------------
# ordering and batching


@dataclass(frozen=True)
class EpochOrder:
    permutation: np.ndarray
    epoch: int
    seed: int


def shuffle_epoch(n: int, seed: int, epoch: int) -> EpochOrder:
    """Fisher-Yates permutation of ``range(n)`` keyed by ``(seed, epoch)``."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    perm = list(range(n))
    if n > 1:
        # j_i uniform on [0, i] for i = n-1 .. 1
        picks = stream(seed, STREAM_SHUFFLE, epoch).integers(0, np.arange(n, 1, -1)).tolist()
        for i, j in zip(range(n - 1, 0, -1), picks):
            perm[i], perm[j] = perm[j], perm[i]
    return EpochOrder(np.array(perm, dtype=np.int64), epoch, seed)


def batches(order: EpochOrder, batch_size: int) -> Iterator[np.ndarray]:
    """Consecutive slices of the permutation; the short final batch is kept."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    perm = order.permutation
    for start in range(0, len(perm), batch_size):
        yield perm[start : start + batch_size]


# ---------------------------------------------------------------------------
# augmentation


def augment_pad_crop_flip(image: np.ndarray, pad: int, flip_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by ``pad``, crop a uniform h x w window, mirror horizontally with ``flip_prob``.

    Always consumes three draws from ``rng`` (row, column, flip).
    """
    if pad < 0 or not 0 <= flip_prob <= 1:
        raise ValidationError(f"need pad >= 0 and flip_prob in [0, 1], got {pad}, {flip_prob}")
    _, h, w = image.shape
    top, left = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    flip = rng.random() < flip_prob
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad))) if pad else image
    out = padded[:, top : top + h, left : left + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_epoch(features: np.ndarray, pad: int, flip_prob: float, seed: int, epoch: int) -> np.ndarray:
    """Augmented view of every sample for one epoch, drawn in sample-id order."""
    rng = stream(seed, STREAM_AUGMENT, epoch)
    return np.stack([augment_pad_crop_flip(img, pad, flip_prob, rng) for img in features])

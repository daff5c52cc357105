"""CIFAR-10 binary ingestion, augmentation, splitting and synthetic data.

Images are float arrays of shape (N, 3, H, W) with raw pixel values in
[0, 1]; normalization is part of :func:`augment`.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

RECORD_BYTES = 3073
IMAGE_BYTES = 3072
DATA_ENV = "SCOPED_DNAS_DATA"

PathLike = Union[str, os.PathLike]


@dataclass
class ImageBatch:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be N x 3 x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "ImageBatch":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageBatch(self.images[indices], self.labels[indices])


# CIFAR-10 binary format ----------------------------------------------------------


def parse_cifar10_bytes(raw: bytes, num_classes: int = 10) -> ImageBatch:
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise ValueError(f"CIFAR-10 batch length {len(raw)} is not a positive multiple of {RECORD_BYTES} (truncated file?)")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise ValueError(f"record {bad} has label byte {labels[bad]} > {num_classes - 1}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return ImageBatch(images, labels)


def load_cifar10_batchfile(path: PathLike) -> ImageBatch:
    """Read one ``data_batch_*.bin`` / ``test_batch.bin`` file."""
    return parse_cifar10_bytes(Path(path).read_bytes())


def dump_cifar10_bytes(batch: ImageBatch) -> bytes:
    if batch.images.shape[1:] != (3, 32, 32):
        raise ValueError(f"CIFAR-10 records are 3 x 32 x 32, got {batch.images.shape[1:]}")
    pixels = np.rint(np.clip(batch.images, 0, 1) * 255).astype(np.uint8).reshape(len(batch), IMAGE_BYTES)
    out = np.empty((len(batch), RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = batch.labels.astype(np.uint8)
    out[:, 1:] = pixels
    return out.tobytes()


def save_cifar10_batchfile(batch: ImageBatch, path: PathLike) -> None:
    Path(path).write_bytes(dump_cifar10_bytes(batch))


def resolve_data_dir(data_dir: Optional[PathLike] = None) -> Optional[Path]:
    root = data_dir or os.environ.get(DATA_ENV)
    if not root:
        return None
    root = Path(root)
    nested = root / "cifar-10-batches-bin"
    return nested if nested.is_dir() else root


def load_cifar10(root: PathLike, train: bool = True) -> ImageBatch:
    root = resolve_data_dir(root)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if train else ["test_batch.bin"]
    parts = []
    for name in names:
        path = root / name
        if not path.is_file():
            raise FileNotFoundError(f"missing CIFAR-10 file {path}")
        parts.append(load_cifar10_batchfile(path))
    return ImageBatch(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


# augmentation ------------------------------------------------------------------


@dataclass
class AugmentSpec:
    scale: tuple[float, float] = (0.08, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    size: int = 224
    flip_prob: float = 0.5
    mean: Sequence[float] = (0.0, 0.0, 0.0)
    std: Sequence[float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip probability must lie in [0, 1], got {self.flip_prob}")
        if self.size < 8:
            raise ValueError(f"resize target must be at least 8, got {self.size}")
        if not 0 < self.scale[0] <= self.scale[1] <= 1:
            raise ValueError(f"invalid crop scale range {self.scale}")
        if not 0 < self.ratio[0] <= self.ratio[1]:
            raise ValueError(f"invalid aspect range {self.ratio}")
        if any(s <= 0 for s in self.std):
            raise ValueError("normalization std must be positive")


def _resize_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Bilinear interpolation weights, half-pixel centres (align_corners=False).

    Source coordinate of output pixel d is (d + 0.5) * in/out - 0.5, clamped
    below at 0; the right neighbour index is clamped to the last pixel.
    """
    scale = in_size / out_size
    src = np.maximum((np.arange(out_size) + 0.5) * scale - 0.5, 0.0)
    lo = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a C x H x W image."""
    _, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()
    rh = _resize_matrix(height, h)
    rw = _resize_matrix(width, w)
    return np.einsum("ij,cjk,lk->cil", rh, image.astype(np.float64), rw).astype(image.dtype)


def random_resized_crop_box(h: int, w: int, spec: AugmentSpec, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """(top, left, height, width) of a random crop; ten attempts, then a
    centre crop with the aspect ratio clamped into range."""
    area = h * w
    log_ratio = (math.log(spec.ratio[0]), math.log(spec.ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(spec.scale[0], spec.scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < spec.ratio[0]:
        cw, ch = w, int(round(w / spec.ratio[0]))
    elif in_ratio > spec.ratio[1]:
        ch, cw = h, int(round(h * spec.ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def normalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=images.dtype).reshape(1, 3, 1, 1)
    s = np.asarray(std, dtype=images.dtype).reshape(1, 3, 1, 1)
    return (images - m) / s


def augment(
    batch: ImageBatch,
    spec: AugmentSpec,
    rng: Optional[np.random.Generator] = None,
    mode: str = "train",
) -> ImageBatch:
    """Train: random-resized crop -> horizontal flip -> normalize.
    Eval: resize -> normalize, without touching ``rng``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    n, c, h, w = batch.images.shape
    out = np.empty((n, c, spec.size, spec.size), dtype=batch.images.dtype)
    for i, img in enumerate(batch.images):
        if mode == "train":
            top, left, ch, cw = random_resized_crop_box(h, w, spec, rng)
            img = resize_bilinear(img[:, top : top + ch, left : left + cw], spec.size, spec.size)
            if rng.random() < spec.flip_prob:
                img = img[:, :, ::-1]
        else:
            img = resize_bilinear(img, spec.size, spec.size)
        out[i] = img
    return ImageBatch(normalize(out, spec.mean, spec.std), batch.labels.copy())


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1].copy()


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (population) std in one pass over the data."""
    x = images.astype(np.float64)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    s1 = x.sum(axis=(0, 2, 3))
    s2 = np.einsum("nchw,nchw->c", x, x)
    mean = s1 / count
    var = np.maximum(s2 / count - mean**2, 0.0)
    return mean, np.sqrt(var)


# splitting and streaming -----------------------------------------------------------


def split_train_val(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled partition of ``range(n)`` into train/val indices."""
    if not 0 < fraction < 1:
        raise ValueError(f"train fraction must lie strictly between 0 and 1, got {fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(fraction * n))
    train, val = np.sort(perm[:cut]), np.sort(perm[cut:])
    if len(train) == 0 or len(val) == 0:
        raise ValueError(f"split of {n} items at fraction {fraction} leaves one side empty")
    return train, val


@dataclass
class BatchStream:
    """Endless minibatch iterator over a fixed index set.

    Each pass reshuffles with a seed derived from (seed, pass number); each
    batch's augmentation draws from a generator derived from (seed, pass,
    batch position), so delivered batches depend only on the seed.
    """

    dataset: ImageBatch
    indices: np.ndarray
    batch_size: int
    seed: int
    spec: Optional[AugmentSpec] = None
    mode: str = "train"
    shuffle: bool = True
    epoch: int = field(default=0, init=False)
    _order: Optional[np.ndarray] = field(default=None, init=False, repr=False)
    _pos: int = field(default=0, init=False, repr=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(self.indices) == 0:
            raise ValueError("stream needs at least one index")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.indices) / self.batch_size)

    def _start_pass(self) -> None:
        if self.shuffle:
            rng = np.random.default_rng([self.seed, self.epoch])
            self._order = self.indices[rng.permutation(len(self.indices))]
        else:
            self._order = self.indices
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self._order is None:
            self._start_pass()
        elif self._pos >= len(self._order):
            self.epoch += 1
            self._start_pass()
        chunk = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return chunk

    def next_batch(self) -> ImageBatch:
        chunk = self.next_indices()
        position = self._pos // self.batch_size - 1
        batch = self.dataset.subset(chunk)
        if self.spec is None:
            return batch
        rng = np.random.default_rng([self.seed, self.epoch, position, 1])
        return augment(batch, self.spec, rng, self.mode)

    def __iter__(self):
        while True:
            yield self.next_batch()

    def full_pass(self):
        """Batches covering every index once, in index order, without
        disturbing the stream position."""
        for start in range(0, len(self.indices), self.batch_size):
            batch = self.dataset.subset(self.indices[start : start + self.batch_size])
            if self.spec is not None:
                batch = augment(batch, self.spec, None, "eval")
            yield batch


# synthetic data ------------------------------------------------------------------


def class_templates(classes: int, image_hw: int, seed: int) -> np.ndarray:
    """One smooth colour/grating pattern per class, values in [0, 1]."""
    rng = np.random.default_rng([seed, 0])
    yy, xx = np.meshgrid(np.arange(image_hw), np.arange(image_hw), indexing="ij")
    templates = np.empty((classes, 3, image_hw, image_hw))
    for k in range(classes):
        angle = math.pi * k / classes
        freq = 2 * math.pi * (1 + k % 3) / image_hw
        phase = rng.uniform(0, 2 * math.pi)
        wave = np.sin(freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
        colour = rng.uniform(0.2, 0.8, size=3)
        templates[k] = np.clip(colour[:, None, None] + 0.25 * wave[None], 0, 1)
    return templates


def synthetic_dataset(
    classes: int = 10,
    size: int = 2000,
    image_hw: int = 32,
    seed: int = 0,
    noise: float = 0.1,
) -> ImageBatch:
    """Separable class-template images plus Gaussian noise; labels are
    assigned round-robin so the histogram is uniform within one."""
    if classes < 2:
        raise ValueError(f"need at least two classes, got {classes}")
    templates = class_templates(classes, image_hw, seed)
    labels = np.arange(size) % classes
    rng = np.random.default_rng([seed, 1])
    images = templates[labels] + noise * rng.standard_normal((size, 3, image_hw, image_hw))
    return ImageBatch(np.clip(images, 0, 1).astype(np.float32), labels)

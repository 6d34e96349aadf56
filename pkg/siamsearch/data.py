"""
Datasets, augmentation and batching.

Images are float32 arrays of shape (N, 3, H, W) with values in [0, 1].
Iteration order and augmentation draws are pure functions of (seed, epoch).
"""

import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .config import AugmentConfig, DataConfig
from .errors import CorruptRecordError, DatasetFormatError, RangeError, ShapeError

logger = logging.getLogger(__name__)

CIFAR_SIDE = 32
CIFAR_CLASSES = 10
RECORD_BYTES = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)

# rng stream tags, mixed into (seed, epoch)
ORDER_STREAM = 0
AUGMENT_STREAM = 1


@dataclass(frozen=True)
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    num_classes: int = 0

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ShapeError("images must be (N, 3, H, W)", self.images.shape)
        if self.images.shape[2] != self.images.shape[3]:
            raise ShapeError("images must be square", self.images.shape[2:], self.images.shape[2:][::-1])
        if self.labels is not None:
            if self.labels.shape != (len(self.images),):
                raise ShapeError("one label per image", self.labels.shape, (len(self.images),))
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise RangeError(f"labels must lie in [0, {self.num_classes})")
        self.images.flags.writeable = False

    def __len__(self) -> int:
        return len(self.images)

    @property
    def size(self) -> int:
        return self.images.shape[2]

    def subset(self, indices: np.ndarray) -> "ImageDataset":
        labels = None if self.labels is None else self.labels[indices]
        return ImageDataset(self.images[indices], labels, self.num_classes)

    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(0, dtype=np.int64)
        return np.bincount(self.labels, minlength=self.num_classes)


# CIFAR-10 binary format


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) % RECORD_BYTES:
        raise DatasetFormatError(f"{path}: size {len(raw)} is not a multiple of {RECORD_BYTES}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise CorruptRecordError(f"{path}: record {bad[0]} has label {labels[bad[0]]}")
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_bin(
    path: Path | str,
    train: bool = True,
    limit: int = 0,
    seed: int = 0,
) -> ImageDataset:
    """
    Load CIFAR-10 binary records.

    Args:
        path: a single .bin file, or the extracted directory holding
              data_batch_1..5.bin and test_batch.bin
        train: which half to read when path is a directory
        limit: keep a seeded subset of this many records (0 keeps all)
        seed: subset seed

    Returns:
        Dataset of N images scaled to [0, 1] with labels 0-9
    """
    path = Path(path)
    if path.is_dir():
        names = CIFAR_TRAIN_FILES if train else (CIFAR_TEST_FILE,)
        files = [path / name for name in names if (path / name).exists()]
        if not files:
            raise FileNotFoundError(f"no CIFAR-10 batch files in {path}")
    else:
        files = [path]

    parts = [_read_cifar_file(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if limit and limit < len(images):
        keep = np.sort(np.random.default_rng(seed).permutation(len(images))[:limit])
        images, labels = images[keep], labels[keep]
    logger.info("Loaded %d CIFAR-10 records from %s", len(images), path)
    return ImageDataset(images, labels, CIFAR_CLASSES)


def write_cifar10_bin(dataset: ImageDataset, path: Path | str) -> Path:
    """Write a labeled 32x32 dataset as CIFAR-10 binary records."""
    if dataset.labels is None:
        raise DatasetFormatError("CIFAR-10 records need labels")
    if dataset.size != CIFAR_SIDE:
        raise ShapeError("CIFAR-10 records are 32x32", dataset.images.shape[2:], (CIFAR_SIDE, CIFAR_SIDE))
    if len(dataset.labels) and dataset.labels.max() >= CIFAR_CLASSES:
        raise CorruptRecordError("labels above 9 cannot be written")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(records.tobytes())
    return path


# synthetic patterns


def _shape_mask(shape_id: int, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    match shape_id % 6:
        case 0:
            return (np.abs(dy) <= r) & (np.abs(dx) <= r)
        case 1:
            return dy * dy + dx * dx <= r * r
        case 2:
            return np.abs(dy) <= r / 3
        case 3:
            return np.abs(dx) <= r / 3
        case 4:
            return ((np.abs(dy) <= r / 4) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r / 4) & (np.abs(dy) <= r))
        case _:
            d = np.sqrt(dy * dy + dx * dx)
            return (d <= r) & (d >= r * 0.6)


def synth_dataset(seed: int, n: int, num_classes: int, size: int = 32) -> ImageDataset:
    """
    Class-conditional coloured shapes over a noisy background.

    Each class has its own base hue and shape; position, scale, brightness and
    pixel noise are drawn per image. Classes are balanced (counts differ by at
    most one) and the dataset is a pure function of its arguments.
    """
    if num_classes < 1 or n < num_classes:
        raise RangeError(f"need n >= num_classes >= 1, got n={n}, classes={num_classes}")
    if size < 8:
        raise RangeError(f"image size must be >= 8, got {size}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    hues = np.arange(num_classes) / num_classes
    base_colors = hsv_to_rgb(np.stack([hues, np.full(num_classes, 0.85), np.ones(num_classes)], axis=1))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, label in enumerate(labels):
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        r = rng.uniform(0.2, 0.35) * size
        mask = _shape_mask(int(label), yy, xx, cy, cx, r)
        background = rng.uniform(0.1, 0.3)
        color = base_colors[label] * rng.uniform(0.7, 1.0)
        img = np.full((3, size, size), background, dtype=np.float32)
        img[:, mask] = color[:, None]
        img += rng.normal(0.0, 0.05, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageDataset(images, labels, num_classes)


def load_dataset(cfg: DataConfig, train: bool = True) -> ImageDataset:
    """Dataset named by the data section; the test half uses an independent seed."""
    if cfg.kind == "cifar10":
        return load_cifar10_bin(cfg.path, train=train, limit=cfg.limit if train else 0, seed=cfg.seed)
    if train:
        return synth_dataset(cfg.seed, cfg.n, cfg.classes, cfg.size)
    return synth_dataset(cfg.seed + 1_000_003, cfg.test_n, cfg.classes, cfg.size)


# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    grayscale_prob: float = 0.2
    mean: tuple[float, float, float] = (0.4914, 0.4822, 0.4465)
    std: tuple[float, float, float] = (0.2470, 0.2435, 0.2616)
    enabled: bool = True
    aspect_range: tuple[float, float] = field(default=(3 / 4, 4 / 3))

    @classmethod
    def from_config(cls, cfg: AugmentConfig) -> "AugmentPolicy":
        return cls(
            crop_scale=(cfg.crop_min, cfg.crop_max),
            flip_prob=cfg.flip_prob,
            jitter_prob=cfg.jitter_prob,
            brightness=cfg.brightness,
            contrast=cfg.contrast,
            grayscale_prob=cfg.grayscale_prob,
            mean=tuple(cfg.mean),
            std=tuple(cfg.std),
            enabled=cfg.enabled,
        )

    @classmethod
    def only(cls, **kwargs) -> "AugmentPolicy":
        """Every transform off except the ones passed in."""
        off = dict(crop_scale=(1.0, 1.0), flip_prob=0.0, jitter_prob=0.0, grayscale_prob=0.0)
        return cls(**(off | kwargs))


def normalize(img: np.ndarray, policy: AugmentPolicy) -> np.ndarray:
    mean = np.asarray(policy.mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(policy.std, dtype=np.float32).reshape(-1, 1, 1)
    return ((img - mean) / std).astype(np.float32)


def _random_resized_crop(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    area = rng.uniform(*policy.crop_scale) * h * w
    log_lo, log_hi = np.log(policy.aspect_range)
    aspect = math.exp(rng.uniform(log_lo, log_hi))
    ch = min(h, max(1, round(math.sqrt(area / aspect))))
    cw = min(w, max(1, round(math.sqrt(area * aspect))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    # nearest-neighbour resize back to (h, w)
    rows = top + (np.arange(h) * ch // h)
    cols = left + (np.arange(w) * cw // w)
    return img[:, rows[:, None], cols[None, :]]


def _random_view(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    view = img
    if policy.crop_scale[0] < 1.0:
        view = _random_resized_crop(view, policy, rng)
    if rng.random() < policy.flip_prob:
        view = view[:, :, ::-1]
    if rng.random() < policy.jitter_prob:
        b = rng.uniform(1 - policy.brightness, 1 + policy.brightness, size=(3, 1, 1))
        c = rng.uniform(1 - policy.contrast, 1 + policy.contrast, size=(3, 1, 1))
        view = view * b
        channel_mean = view.mean(axis=(1, 2), keepdims=True)
        view = np.clip(channel_mean + (view - channel_mean) * c, 0.0, 1.0)
    if rng.random() < policy.grayscale_prob:
        gray = np.tensordot(GRAY_WEIGHTS, view, axes=1)
        view = np.broadcast_to(gray, view.shape)
    return normalize(np.ascontiguousarray(view, dtype=np.float32), policy)


def augment_pair(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independent random views of one (3, H, W) image."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError("augment_pair expects (3, H, W)", img.shape)
    if not policy.enabled:
        view = normalize(img, policy)
        return view, view.copy()
    return _random_view(img, policy, rng), _random_view(img, policy, rng)


def augment_batch(
    images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    if not policy.enabled:
        views = normalize_batch(images, policy)
        return views, views.copy()
    pairs = [augment_pair(img, policy, rng) for img in images]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def normalize_batch(images: np.ndarray, policy: AugmentPolicy) -> np.ndarray:
    mean = np.asarray(policy.mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(policy.std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((images - mean) / std).astype(np.float32)


# splitting and batching


def split_train_val(dataset: ImageDataset, ratio: float, seed: int) -> tuple[ImageDataset, ImageDataset]:
    """Seeded disjoint split; the first part (D_t) receives ceil(ratio * N) items."""
    if not 0.0 < ratio < 1.0:
        raise RangeError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(dataset)
    n_train = math.ceil(ratio * n)
    if n_train == 0 or n_train == n:
        raise RangeError(f"split of {n} items at ratio {ratio} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


def batch_indices(n: int, batch_size: int, seed: int, epoch: int, min_batch: int = 2) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; a final batch below min_batch is dropped."""
    if batch_size < 1:
        raise RangeError(f"batch size must be >= 1, got {batch_size}")
    perm = np.random.default_rng([seed, epoch, ORDER_STREAM]).permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < min_batch:
        batches.pop()
    return batches


def iter_batches(
    dataset: ImageDataset, batch_size: int, seed: int, epoch: int, min_batch: int = 2
) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
    for idx in batch_indices(len(dataset), batch_size, seed, epoch, min_batch):
        yield dataset.images[idx], None if dataset.labels is None else dataset.labels[idx]


def augment_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    """Augmentation generator for one (seed, epoch, stream)."""
    return np.random.default_rng([seed, epoch, AUGMENT_STREAM, stream])

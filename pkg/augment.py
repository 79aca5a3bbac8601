"""
Label smoothing, mixup, CutMix and the datasets they are applied to.

All randomness comes from an explicit ``numpy.random.Generator`` so a batch is
a pure function of its inputs and the generator state.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from errors import ConfigurationError, InputError
from tensor_core import Tensor

logger = logging.getLogger(__name__)

MIX_MODES = ("none", "mixup", "cutmix", "alternate")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

ImageOp = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class AugmentConfig:
    """Regularization settings of the training recipe."""

    mixup_alpha: float = 0.8
    cutmix_alpha: float = 1.0
    smoothing_eps: float = 0.1
    mix_mode: str = "alternate"
    rng_seed: int = 0

    def validate(self) -> None:
        if self.mix_mode not in MIX_MODES:
            msg = f"mix_mode must be one of {MIX_MODES}, got {self.mix_mode!r}"
            raise ConfigurationError(msg)
        if self.mix_mode in ("mixup", "alternate") and self.mixup_alpha <= 0:
            msg = "mixup_alpha must be positive when mixup is active"
            raise ConfigurationError(msg)
        if self.mix_mode in ("cutmix", "alternate") and self.cutmix_alpha <= 0:
            msg = "cutmix_alpha must be positive when CutMix is active"
            raise ConfigurationError(msg)
        if not 0 <= self.smoothing_eps < 1:
            msg = f"smoothing_eps must be in [0, 1), got {self.smoothing_eps}"
            raise ConfigurationError(msg)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AugmentConfig:
        config = cls(**data)
        config.validate()
        return config


@dataclass
class Batch:
    """Images with per-row target distributions; ``lam`` is the mixing weight used."""

    images: Tensor
    targets: Tensor
    lam: float = 1.0


def smooth_labels(
    classes: Sequence[int],
    num_classes: int,
    eps: float,
    dtype: Any = np.float32,
) -> Tensor:
    """Rows with 1 - eps + eps/K at the true class and eps/K elsewhere."""
    labels = np.asarray(classes, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        msg = f"class indices must lie in [0, {num_classes})"
        raise InputError(msg)
    off = eps / num_classes
    targets = np.full((labels.size, num_classes), off, dtype=np.float64)
    targets[np.arange(labels.size), labels] = 1.0 - eps + off
    return Tensor(targets.astype(dtype))


def sample_beta(alpha: float, rng: np.random.Generator) -> float:
    """Beta(alpha, alpha) draw built from two Gamma draws."""
    x = rng.gamma(alpha)
    y = rng.gamma(alpha)
    return float(x / (x + y)) if x + y > 0 else 0.5


def mixup_batch(
    batch: Batch,
    alpha: float,
    rng: np.random.Generator,
    *,
    lam: float | None = None,
    perm: np.ndarray | None = None,
) -> Batch:
    """
    Convexly combine each example with a partner from a batch permutation.

    Args:
        batch: Batch to mix.
        alpha: Beta distribution parameter.
        rng: Random generator.
        lam: Optional fixed mixing weight instead of a Beta draw.
        perm: Optional fixed partner permutation.

    Returns:
        The mixed batch.

    """
    if lam is None:
        lam = sample_beta(alpha, rng)
    if perm is None:
        perm = rng.permutation(batch.images.shape[0])
    x, t = batch.images.data, batch.targets.data
    images = (lam * x + (1.0 - lam) * x[perm]).astype(x.dtype)
    targets = (lam * t + (1.0 - lam) * t[perm]).astype(t.dtype)
    return Batch(Tensor(images), Tensor(targets), float(lam))


def cutmix_box(height: int, width: int, lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Box (y1, y2, x1, x2) of area about (1 - lam) * H * W, centered uniformly and clipped."""
    ratio = math.sqrt(1.0 - lam)
    cut_h, cut_w = int(height * ratio), int(width * ratio)
    cy, cx = int(rng.integers(height)), int(rng.integers(width))
    y1, y2 = np.clip((cy - cut_h // 2, cy + cut_h // 2), 0, height)
    x1, x2 = np.clip((cx - cut_w // 2, cx + cut_w // 2), 0, width)
    return int(y1), int(y2), int(x1), int(x2)


def cutmix_batch(
    batch: Batch,
    alpha: float,
    rng: np.random.Generator,
    *,
    lam: float | None = None,
    box: tuple[int, int, int, int] | None = None,
    perm: np.ndarray | None = None,
) -> Batch:
    """
    Paste a rectangle from permuted partners and mix targets by pasted area.

    The effective weight is recomputed as 1 - pasted_area / (H * W), so clipping
    at the borders is reflected in the targets.
    """
    x, t = batch.images.data, batch.targets.data
    height, width = x.shape[-2:]
    if box is None:
        if lam is None:
            lam = sample_beta(alpha, rng)
        box = cutmix_box(height, width, lam, rng)
    if perm is None:
        perm = rng.permutation(x.shape[0])
    y1, y2, x1, x2 = box
    images = x.copy()
    images[:, :, y1:y2, x1:x2] = x[perm][:, :, y1:y2, x1:x2]
    area = max(0, y2 - y1) * max(0, x2 - x1)
    effective = 1.0 - area / (height * width)
    targets = (effective * t + (1.0 - effective) * t[perm]).astype(t.dtype)
    return Batch(Tensor(images), Tensor(targets), effective)


class AugmentPipeline:
    """Image ops, label smoothing and the configured mixing policy."""

    def __init__(
        self,
        cfg: AugmentConfig,
        num_classes: int,
        image_ops: Sequence[ImageOp] = (),
    ) -> None:
        """
        Initialize the pipeline.

        Args:
            cfg: Augmentation settings.
            num_classes: Number of target classes.
            image_ops: Extra per-batch image transforms applied first.

        """
        cfg.validate()
        self.cfg = cfg
        self.num_classes = num_classes
        self.image_ops = tuple(image_ops)

    def __call__(self, images: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> Batch:
        for op in self.image_ops:
            images = op(images, rng)
        targets = smooth_labels(labels, self.num_classes, self.cfg.smoothing_eps, dtype=images.dtype)
        batch = Batch(Tensor(images), targets)
        mode = self.cfg.mix_mode
        if mode == "alternate":
            mode = "mixup" if rng.random() < 0.5 else "cutmix"
        if mode == "mixup":
            return mixup_batch(batch, self.cfg.mixup_alpha, rng)
        if mode == "cutmix":
            return cutmix_batch(batch, self.cfg.cutmix_alpha, rng)
        return batch


@dataclass
class ImageDataset:
    """A fixed train/validation split of (N, 3, H, W) float32 images."""

    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    num_classes: int
    class_names: tuple[str, ...] = ()

    @property
    def image_size(self) -> int:
        return int(self.train_images.shape[-1])

    def batches(
        self,
        batch_size: int,
        rng: np.random.Generator | None = None,
        *,
        split: str = "train",
        drop_last: bool = False,
    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (images, labels) minibatches; shuffled when ``rng`` is given."""
        images, labels = (
            (self.train_images, self.train_labels)
            if split == "train"
            else (self.val_images, self.val_labels)
        )
        order = rng.permutation(len(labels)) if rng is not None else np.arange(len(labels))
        stop = len(order) - batch_size + 1 if drop_last else len(order)
        for start in range(0, max(stop, 0), batch_size):
            index = order[start : start + batch_size]
            yield images[index], labels[index]


def _stratified_split(
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    val_fraction: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    train_idx, val_idx = [], []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        n_val = round(len(members) * val_fraction)
        split = len(members) - n_val
        train_idx.append(members[:split])
        val_idx.append(members[split:])
    train = np.concatenate(train_idx)
    val = np.concatenate(val_idx)
    return images[train], labels[train], images[val], labels[val]


def synth_dataset(
    n: int,
    image_size: int,
    num_classes: int,
    seed: int,
    *,
    val_fraction: float = 0.2,
    noise: float = 0.5,
) -> ImageDataset:
    """
    Deterministic class-conditional images: class-keyed Gaussian blobs plus noise.

    Each class owns two colored blobs at fixed positions; every example is its
    class template, randomly shifted by a few pixels and rescaled, plus i.i.d.
    Gaussian noise. Classes are balanced (remainders go to the lowest indices)
    and each class is split into train and validation by ``val_fraction``.
    """
    if n < num_classes or num_classes < 2:
        msg = "synthetic dataset needs num_classes >= 2 and n >= num_classes"
        raise InputError(msg)
    rng = np.random.default_rng(seed)
    grid = np.arange(image_size, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    sigma = image_size / 8
    templates = np.zeros((num_classes, 3, image_size, image_size))
    for c in range(num_classes):
        for _ in range(2):
            cy, cx = rng.uniform(0.2, 0.8, size=2) * image_size
            color = rng.normal(size=3)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
            templates[c] += color[:, None, None] * blob

    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    labels = np.repeat(np.arange(num_classes), counts)
    max_shift = max(1, image_size // 16)
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    for i, c in enumerate(labels):
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        scale = rng.uniform(0.8, 1.2)
        shifted = np.roll(templates[c], (int(dy), int(dx)), axis=(1, 2))
        images[i] = scale * shifted + noise * rng.normal(size=shifted.shape)
    train_x, train_y, val_x, val_y = _stratified_split(images, labels, num_classes, val_fraction)
    logger.info(
        "Synthetic dataset: %d train / %d val, %d classes, %dpx",
        len(train_y),
        len(val_y),
        num_classes,
        image_size,
    )
    return ImageDataset(train_x, train_y, val_x, val_y, num_classes)


def load_image_folder(
    root: str | Path,
    image_size: int,
    *,
    val_fraction: float = 0.2,
) -> ImageDataset:
    """
    Load 8-bit RGB images from per-class subdirectories of ``root``.

    Images are resized to ``image_size`` x ``image_size`` and scaled to [-1, 1].
    """
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not class_dirs:
        msg = f"no class subdirectories found under {root}"
        raise InputError(msg)
    images, labels = [], []
    for index, class_dir in enumerate(class_dirs):
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            with Image.open(path) as img:
                rgb = img.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                array = np.asarray(rgb, dtype=np.float32) / 127.5 - 1.0
            images.append(array.transpose(2, 0, 1))
            labels.append(index)
    if not images:
        msg = f"no images found under {root}"
        raise InputError(msg)
    stacked = np.stack(images)
    label_array = np.asarray(labels, dtype=np.int64)
    train_x, train_y, val_x, val_y = _stratified_split(stacked, label_array, len(class_dirs), val_fraction)
    logger.info("Loaded %d images in %d classes from %s", len(labels), len(class_dirs), root)
    return ImageDataset(
        train_x,
        train_y,
        val_x,
        val_y,
        len(class_dirs),
        tuple(p.name for p in class_dirs),
    )

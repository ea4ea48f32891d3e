"""
Dataset ingestion and stochastic two-view generation.

Datasets are read from their published on-disk layouts under a root
directory. Randomness is always passed in explicitly: batch order,
augmentation and affine sampling are keyed by (seed, epoch, step), so the
stream does not depend on how many prefetch workers produce it.
"""

import logging
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from PIL import Image
from torch.utils.data import Dataset

from config import settings
from models.batches import ImageBatch
from models.exceptions import ConfigurationError, ContractError, IngestionError
from models.schemas import AugmentationConfig

logger = logging.getLogger(__name__)

SPLITS = ("train", "eval")

# Independent streams derived from one (seed, epoch, step) key
SHUFFLE_STREAM = 0
VIEW_STREAM = 1
AFFINE_STREAM = 2

CALTECH_SPLIT_SEED = 0
CALTECH_TRAIN_FRACTION = 0.8
CALTECH_IMAGE_SIZE = 64
CALTECH_BACKGROUND = "BACKGROUND_Google"

SYNTHETIC_CLASSES = 10
SYNTHETIC_SIZES = {"train": 2000, "eval": 500}
SYNTHETIC_IMAGE_SIZE = 32


def keyed_rng(seed: int, epoch: int, step: int, stream: int) -> np.random.Generator:
    """Generator owned by one (seed, epoch, step, stream) cell of the run."""
    return np.random.default_rng([int(seed), int(epoch), int(step), int(stream)])


@dataclass(eq=False)
class ImageCollection(Dataset):
    """Indexed images (uint8, N x H x W x C) with labels and provenance ids."""

    name: str
    split: str
    images: np.ndarray
    labels: np.ndarray
    ids: List[str]
    num_classes: int

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, int]:
        return _to_tensor(self.images[index : index + 1])[0], int(self.labels[index])

    @property
    def image_size(self) -> Tuple[int, int]:
        return int(self.images.shape[1]), int(self.images.shape[2])

    def batch(self, indices: Sequence[int], resolution: Optional[int] = None) -> ImageBatch:
        """Deterministic preprocessing only: scale to [0, 1] and resize."""
        indices = np.asarray(indices, dtype=np.int64)
        data = _to_tensor(self.images[indices])
        if resolution is not None and tuple(data.shape[-2:]) != (resolution, resolution):
            data = TF.resize(data, [resolution, resolution], antialias=True).clamp_(0.0, 1.0)
        return ImageBatch(data=data, ids=[self.ids[i] for i in indices])


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float().div_(255.0)


# ---------------------------------------------------------------------------
# Readers for the published layouts
# ---------------------------------------------------------------------------


def _require(path: Path) -> Path:
    if not path.exists():
        raise IngestionError(f"Dataset file not found: {path}", path=str(path))
    return path


def _unpickle(path: Path) -> dict:
    try:
        with open(_require(path), "rb") as fh:
            return pickle.load(fh, encoding="bytes")
    except IngestionError:
        raise
    except Exception as e:
        raise IngestionError(f"Could not read {path}: {e}", path=str(path)) from e


def _cifar_arrays(entries: List[dict], label_key: bytes) -> Tuple[np.ndarray, np.ndarray]:
    data = np.concatenate([np.asarray(e[b"data"], dtype=np.uint8) for e in entries])
    labels = np.concatenate([np.asarray(e[label_key], dtype=np.int64) for e in entries])
    images = data.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, labels


def _read_cifar10(root: Path, split: str) -> Tuple[np.ndarray, np.ndarray, int]:
    base = root / "cifar-10-batches-py"
    names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    images, labels = _cifar_arrays([_unpickle(base / n) for n in names], b"labels")
    return images, labels, 10


def _read_cifar100(root: Path, split: str) -> Tuple[np.ndarray, np.ndarray, int]:
    base = root / "cifar-100-python"
    images, labels = _cifar_arrays([_unpickle(base / ("train" if split == "train" else "test"))], b"fine_labels")
    return images, labels, 100


def _load_rgb(path: Path, size: Optional[int] = None) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            return np.asarray(img, dtype=np.uint8)
    except Exception as e:
        raise IngestionError(f"Could not decode image {path}: {e}", path=str(path)) from e


def _read_tiny_imagenet(root: Path, split: str) -> Tuple[np.ndarray, np.ndarray, int]:
    base = root / "tiny-imagenet-200"
    wnids = _require(base / "wnids.txt").read_text().split()
    class_index = {wnid: i for i, wnid in enumerate(wnids)}

    files: List[Path] = []
    labels: List[int] = []
    if split == "train":
        for wnid in wnids:
            image_dir = _require(base / "train" / wnid / "images")
            for path in sorted(image_dir.iterdir()):
                files.append(path)
                labels.append(class_index[wnid])
    else:
        annotations = _require(base / "val" / "val_annotations.txt")
        for line in annotations.read_text().splitlines():
            parts = line.split("\t")
            if len(parts) < 2:
                continue
            files.append(_require(base / "val" / "images" / parts[0]))
            labels.append(class_index[parts[1]])

    images = np.stack([_load_rgb(p, 64) for p in files]) if files else np.zeros((0, 64, 64, 3), np.uint8)
    return images, np.asarray(labels, dtype=np.int64), len(wnids)


def _read_caltech101(root: Path, split: str) -> Tuple[np.ndarray, np.ndarray, int]:
    base = root / "caltech101" / "101_ObjectCategories"
    if not base.exists():
        base = root / "101_ObjectCategories"
    _require(base)
    classes = sorted(d.name for d in base.iterdir() if d.is_dir() and d.name != CALTECH_BACKGROUND)

    # Stratified split fixed by its own seed, independent of the ordering seed
    split_rng = np.random.default_rng(CALTECH_SPLIT_SEED)
    files: List[Path] = []
    labels: List[int] = []
    for label, name in enumerate(classes):
        members = sorted((base / name).glob("*.jpg"))
        order = split_rng.permutation(len(members))
        cut = int(round(CALTECH_TRAIN_FRACTION * len(members)))
        chosen = order[:cut] if split == "train" else order[cut:]
        for i in sorted(chosen):
            files.append(members[i])
            labels.append(label)

    size = CALTECH_IMAGE_SIZE
    images = np.stack([_load_rgb(p, size) for p in files]) if files else np.zeros((0, size, size, 3), np.uint8)
    return images, np.asarray(labels, dtype=np.int64), len(classes)


def synthetic_gratings(count: int, seed: int, size: int = SYNTHETIC_IMAGE_SIZE) -> Tuple[np.ndarray, np.ndarray]:
    """
    Oriented colour gratings, one orientation per class, with random
    frequency, phase, tint and pixel noise.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, SYNTHETIC_CLASSES, size=count)
    angle = np.pi * labels / SYNTHETIC_CLASSES + rng.normal(0.0, 0.05, size=count)
    frequency = rng.uniform(1.5, 4.0, size=count)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=count)
    tint = rng.uniform(0.3, 1.0, size=(count, 3))

    coords = (np.arange(size) - (size - 1) / 2.0) / size
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    projection = np.cos(angle)[:, None, None] * xs + np.sin(angle)[:, None, None] * ys
    wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * frequency[:, None, None] * projection + phase[:, None, None])
    images = wave[..., None] * tint[:, None, None, :]
    images = images + rng.normal(0.0, 0.03, size=images.shape)
    return (np.clip(images, 0.0, 1.0) * 255.0).round().astype(np.uint8), labels.astype(np.int64)


def _read_synthetic(root: Path, split: str) -> Tuple[np.ndarray, np.ndarray, int]:
    images, labels = synthetic_gratings(SYNTHETIC_SIZES[split], seed=SPLITS.index(split))
    return images, labels, SYNTHETIC_CLASSES


READERS: Dict[str, Callable[[Path, str], Tuple[np.ndarray, np.ndarray, int]]] = {
    "cifar10": _read_cifar10,
    "cifar100": _read_cifar100,
    "tiny_imagenet": _read_tiny_imagenet,
    "caltech101": _read_caltech101,
    "synthetic": _read_synthetic,
}


def load_dataset(
    name: str,
    root: str,
    split: str = "train",
    limit: Optional[int] = None,
    seed: int = 0,
) -> ImageCollection:
    """
    Load a dataset split in a seed-determined order.

    Args:
        name: Dataset id (cifar10, cifar100, tiny_imagenet, caltech101, synthetic)
        root: Directory holding the published layout
        split: "train" or "eval"
        limit: Keep only the first `limit` items of the ordered split
        seed: Ordering seed

    Returns:
        ImageCollection with labels and provenance ids
    """
    if name not in READERS:
        raise ConfigurationError(f"Unknown dataset id '{name}'; known: {sorted(READERS)}")
    if split not in SPLITS:
        raise ConfigurationError(f"Unknown split '{split}'; expected one of {SPLITS}")

    try:
        images, labels, num_classes = READERS[name](Path(root), split)
    except IngestionError as e:
        logger.error(f"Failed to load {name}/{split}: {str(e)}")
        raise

    order = np.random.default_rng(seed).permutation(len(labels))
    if limit is not None:
        order = order[:limit]

    logger.info(f"Loaded {name}/{split}: {len(order)} of {len(labels)} images, {num_classes} classes")
    return ImageCollection(
        name=name,
        split=split,
        images=images[order],
        labels=labels[order],
        ids=[f"{name}/{split}/{int(i)}" for i in order],
        num_classes=num_classes,
    )


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def _crop_box(rng: np.random.Generator, height: int, width: int, cfg: AugmentationConfig) -> Tuple[int, int, int, int]:
    """RandomResizedCrop box (top, left, h, w): ten rejection attempts, then a centre crop."""
    area = height * width
    log_ratio = np.log(cfg.crop_ratio)
    for _ in range(10):
        target_area = area * rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1])
        aspect = float(np.exp(rng.uniform(log_ratio[0], log_ratio[1])))
        w = int(round(np.sqrt(target_area * aspect)))
        h = int(round(np.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w

    in_ratio = width / height
    if in_ratio < min(cfg.crop_ratio):
        w = width
        h = int(round(w / min(cfg.crop_ratio)))
    elif in_ratio > max(cfg.crop_ratio):
        h = height
        w = int(round(h * max(cfg.crop_ratio)))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def blur_kernel_size(cfg: AugmentationConfig) -> int:
    """Odd kernel side, the configured fraction of the resolution, at least 3."""
    k = max(3, int(cfg.blur_kernel_fraction * cfg.resolution))
    return k if k % 2 == 1 else k + 1


def _color_jitter(img: torch.Tensor, rng: np.random.Generator, cfg: AugmentationConfig) -> torch.Tensor:
    b = rng.uniform(max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness)
    c = rng.uniform(max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast)
    s = rng.uniform(max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation)
    h = rng.uniform(-cfg.hue, cfg.hue)
    rgb = img.shape[0] == 3
    for op in rng.permutation(4):
        if op == 0:
            img = TF.adjust_brightness(img, float(b))
        elif op == 1:
            img = TF.adjust_contrast(img, float(c))
        elif op == 2 and rgb:
            img = TF.adjust_saturation(img, float(s))
        elif op == 3 and rgb:
            img = TF.adjust_hue(img, float(h))
    return img


def augment_image(img: torch.Tensor, cfg: AugmentationConfig, rng: np.random.Generator) -> torch.Tensor:
    """One draw of the augmentation pipeline on a single (C, H, W) image in [0, 1]."""
    res = cfg.resolution
    _, height, width = img.shape

    if cfg.crop_enabled:
        top, left, h, w = _crop_box(rng, height, width, cfg)
        img = TF.resized_crop(img, top, left, h, w, [res, res], antialias=True)
    elif (height, width) != (res, res):
        img = TF.resize(img, [res, res], antialias=True)

    if cfg.flip_enabled and rng.uniform() < cfg.flip_prob:
        img = TF.horizontal_flip(img)

    if cfg.color_jitter_enabled and rng.uniform() < cfg.color_jitter_prob:
        img = _color_jitter(img, rng, cfg)

    if cfg.grayscale_enabled and img.shape[0] == 3 and rng.uniform() < cfg.grayscale_prob:
        img = TF.rgb_to_grayscale(img, num_output_channels=3)

    if cfg.blur_enabled and rng.uniform() < cfg.blur_prob:
        sigma = float(rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1]))
        k = blur_kernel_size(cfg)
        img = TF.gaussian_blur(img, [k, k], [sigma, sigma])

    return img.clamp(0.0, 1.0)


def make_views(img: ImageBatch, cfg: AugmentationConfig, rng: np.random.Generator) -> Tuple[ImageBatch, ImageBatch]:
    """
    Two independently augmented views of every image in the batch.

    Each element draws its own parameters for each view from `rng`, so the
    pair is reproducible from the generator state alone.
    """
    if img.batch_size == 0:
        raise ContractError("make_views needs at least one image")

    first, second = [], []
    for x in img.data:
        first.append(augment_image(x, cfg, rng))
        second.append(augment_image(x, cfg, rng))
    return img.with_data(torch.stack(first)), img.with_data(torch.stack(second))


class ViewBatchDataset(Dataset):
    """
    One item per training step of an epoch: the two views of that step's batch.

    Batch membership and augmentation draws depend only on (seed, epoch,
    step), so a DataLoader with any number of workers yields the same stream.
    Incomplete trailing batches are dropped.
    """

    def __init__(
        self,
        collection: ImageCollection,
        cfg: AugmentationConfig,
        batch_size: int,
        seed: int,
        epoch: int,
    ):
        if batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {batch_size}")
        self.collection = collection
        self.cfg = cfg
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch
        self.order = keyed_rng(seed, epoch, 0, SHUFFLE_STREAM).permutation(len(collection))

    def __len__(self) -> int:
        return len(self.collection) // self.batch_size

    def __getitem__(self, step: int) -> Dict[str, object]:
        if not 0 <= step < len(self):
            raise IndexError(step)
        indices = self.order[step * self.batch_size : (step + 1) * self.batch_size]
        batch = self.collection.batch(indices)
        x1, x2 = make_views(batch, self.cfg, keyed_rng(self.seed, self.epoch, step, VIEW_STREAM))
        return {"x1": x1.data, "x2": x2.data, "ids": batch.ids, "step": step}


def epoch_steps(num_images: int, batch_size: int) -> int:
    """Full batches per epoch; the trailing partial batch is dropped."""
    steps = num_images // batch_size
    if steps == 0:
        raise ConfigurationError(f"{num_images} training images cannot fill one batch of {batch_size}")
    return steps


def default_root(root: Optional[str]) -> str:
    return root or settings.data_root

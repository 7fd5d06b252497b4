"""Corpus ingestion, closed/open-set splits and the training-time augmentation policy.

Layout on disk is ``root/<class_name>/<image>``; class ids are assigned in
lexicographic order of the class directory names.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image, ImageFilter, ImageOps

from dvf.errors import ConfigurationError, DataError, ManifestError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")
MIN_SIDE = 32

# ImageNet statistics, the convention ViT checkpoints are trained with.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

SplitMode = Literal["closed", "open"]


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    label: int
    split: Literal["train", "test"]


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    meta_category: str
    split_mode: SplitMode
    class_names: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == name]

    def labels(self, name: str) -> set[int]:
        return {r.label for r in self.records if r.split == name}

    def check_invariants(self) -> None:
        train, test = self.labels("train"), self.labels("test")
        if self.split_mode == "closed" and train != test:
            raise ManifestError("closed-set manifest must carry the same labels on both sides")
        if self.split_mode == "open" and train & test:
            raise ManifestError(f"open-set manifest leaks labels into test: {sorted(train & test)}")

    def to_json(self) -> dict:
        return {
            "meta_category": self.meta_category,
            "split_mode": self.split_mode,
            "class_names": list(self.class_names),
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "DatasetManifest":
        records = [ImageRecord(**r) for r in payload["records"]]
        return cls(
            records=records,
            meta_category=payload["meta_category"],
            split_mode=payload["split_mode"],
            class_names=list(payload.get("class_names", [])),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def _list_images(class_dir: Path) -> list[Path]:
    return sorted(p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def _check_image(path: Path) -> None:
    try:
        with Image.open(path) as im:
            w, h = im.size
    except Exception as exc:  # PIL raises a zoo of types on bad files
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if w < MIN_SIDE or h < MIN_SIDE:
        raise DataError(f"image {path} is {w}x{h}; both sides must be >= {MIN_SIDE}")


def closed_partition(n: int, fraction: float) -> list[bool]:
    """Train/test flags for ``n`` sorted images of one class.

    Picks ``round(n * fraction)`` train images (clamped so both sides keep at
    least one) and spreads them evenly, so fraction 0.5 alternates test/train.
    """
    n_train = min(max(int(math.floor(n * fraction + 0.5)), 1), n - 1)
    return [(i + 1) * n_train // n > i * n_train // n for i in range(n)]


def build_manifest(
    root: str | Path,
    split_mode: SplitMode = "open",
    split_fraction: float = 0.5,
    meta_category: str = "object",
    validate_images: bool = True,
) -> DatasetManifest:
    root = Path(root)
    if split_mode not in ("closed", "open"):
        raise ConfigurationError(f"split_mode must be 'closed' or 'open', got {split_mode!r}")
    if not 0.0 < split_fraction < 1.0:
        raise ConfigurationError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} is not a directory")

    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    per_class = [(d.name, _list_images(d)) for d in class_dirs]
    per_class = [(name, imgs) for name, imgs in per_class if imgs]
    if not per_class:
        raise ConfigurationError(f"dataset root {root} holds no class directories with images")

    n_train_classes = math.ceil(split_fraction * len(per_class))
    records: list[ImageRecord] = []
    for label, (name, images) in enumerate(per_class):
        if split_mode == "closed":
            if len(images) < 2:
                raise ManifestError(f"class {name!r} has {len(images)} image(s); closed split needs >= 2")
            flags = closed_partition(len(images), split_fraction)
        else:
            flags = [label < n_train_classes] * len(images)
        for path, is_train in zip(images, flags):
            if validate_images:
                _check_image(path)
            records.append(
                ImageRecord(id=f"{name}/{path.stem}", path=str(path), label=label, split="train" if is_train else "test")
            )

    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate image ids (same stem with different extensions?)")
    manifest = DatasetManifest(records, meta_category, split_mode, [name for name, _ in per_class])
    if not manifest.split("train") or not manifest.split("test"):
        raise ManifestError(
            f"{split_mode} split with fraction {split_fraction} over {len(per_class)} classes leaves a side empty"
        )
    manifest.check_invariants()
    return manifest


def load_rgb(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


@dataclass
class AugmentationPolicy:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.2
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    hflip_prob: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        self.blur_sigma_range = tuple(self.blur_sigma_range)
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} strength must be >= 0")
        if self.hue > 0.5:
            raise ConfigurationError("hue strength must be <= 0.5")
        for name in ("grayscale_prob", "blur_prob", "hflip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        lo, hi = self.blur_sigma_range
        if lo > hi or lo <= 0:
            raise ConfigurationError("blur_sigma_range must satisfy 0 < min <= max")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, (0.1, 2.0), 0.0)


def augment(image: Image.Image, policy: AugmentationPolicy, draw: np.random.Generator) -> Image.Image:
    """Color jitter (always), then grayscale / Gaussian blur / flip each on an independent draw.

    Every random number is taken from ``draw`` in a fixed order, so a seeded
    generator reproduces the output bit for bit.
    """
    out = image
    jitter = (
        (policy.brightness, TF.adjust_brightness),
        (policy.contrast, TF.adjust_contrast),
        (policy.saturation, TF.adjust_saturation),
    )
    for strength, fn in jitter:
        factor = draw.uniform(max(0.0, 1.0 - strength), 1.0 + strength)
        if strength > 0:
            out = fn(out, float(factor))
    hue_shift = draw.uniform(-policy.hue, policy.hue)
    if policy.hue > 0:
        out = TF.adjust_hue(out, float(hue_shift))

    if draw.random() < policy.grayscale_prob:
        out = ImageOps.grayscale(out).convert("RGB")
    blur_hit = draw.random() < policy.blur_prob
    sigma = draw.uniform(*policy.blur_sigma_range)
    if blur_hit:
        out = out.filter(ImageFilter.GaussianBlur(radius=float(sigma)))
    if draw.random() < policy.hflip_prob:
        out = ImageOps.mirror(out)
    return out


def resize_crop(
    image: Image.Image,
    train_mode: bool,
    draw: np.random.Generator | None = None,
    crop_size: int = 224,
    resize_size: int | None = None,
) -> Image.Image:
    """Resize to a square (256 for a 224 crop), then take a random or centered crop."""
    if resize_size is None:
        resize_size = round(crop_size * 256 / 224)
    resized = image.resize((resize_size, resize_size), Image.BILINEAR)
    slack = resize_size - crop_size
    if train_mode:
        if draw is None:
            raise ConfigurationError("train-mode crop needs a random draw")
        left, top = int(draw.integers(0, slack + 1)), int(draw.integers(0, slack + 1))
    else:
        left = top = slack // 2
    return resized.crop((left, top, left + crop_size, top + crop_size))


def to_tensor(image: Image.Image) -> torch.Tensor:
    return TF.normalize(TF.to_tensor(image), IMAGENET_MEAN, IMAGENET_STD)


def sample_draw(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator; independent of worker scheduling."""
    return np.random.default_rng([seed, epoch, index])


class ImageFeed:
    """Decodes records (optionally caching the decoded images) and builds batches."""

    def __init__(self, records: Sequence[ImageRecord], crop_size: int, cache: bool = True):
        self.records = list(records)
        self.crop_size = crop_size
        self._cache: dict[int, object] = {}
        self.cache = cache

    def __len__(self) -> int:
        return len(self.records)

    def image(self, i: int):
        if i in self._cache:
            return self._cache[i]
        img = load_rgb(self.records[i].path)
        if min(img.size) < 32:
            raise DataError(f"image {self.records[i].path} is smaller than 32 px")
        if self.cache:
            self._cache[i] = img
        return img

    def train_batch(self, idx: Sequence[int], policy: AugmentationPolicy | None, seed: int, epoch: int):
        tensors = []
        for i in idx:
            draw = sample_draw(seed, epoch, int(i))
            img = self.image(int(i))
            if policy is not None:
                img = augment(img, policy, draw)
            tensors.append(to_tensor(resize_crop(img, True, draw, self.crop_size)))
        labels = [self.records[int(i)].label for i in idx]
        return torch.stack(tensors), labels

    def eval_batch(self, idx: Sequence[int]) -> torch.Tensor:
        return torch.stack([to_tensor(resize_crop(self.image(int(i)), False, crop_size=self.crop_size)) for i in idx])

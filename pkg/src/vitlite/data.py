"""Deterministic procedural image datasets and an image-folder loader."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle", "cross", "ring", "crescent")
_SPLIT_CODE = {"train": 0, "test": 1}
_SUPERSAMPLE = 2
# shape half-width as a fraction of the half image, and background texture / noise amplitudes
SCALE_RANGE = (0.3, 0.55)
TEXTURE_AMP = 0.08
NOISE_AMP = 0.04


@dataclass
class DatasetSpec:
    kind: str = "synthetic-shapes"
    image_size: int = 32
    channels: int = 3
    num_classes: int = 4
    train_size: int = 2000
    test_size: int = 500
    seed: int = 0
    root: str | None = None

    def violations(self, prefix: str = "") -> list[tuple[str, str]]:
        out = []
        if self.kind not in ("synthetic-shapes", "image-folder"):
            out.append((prefix + "kind", f"unknown dataset kind {self.kind!r}"))
        if self.kind == "synthetic-shapes":
            if not 2 <= self.num_classes <= len(SHAPES):
                out.append((prefix + "num_classes", f"synthetic shapes support 2..{len(SHAPES)} classes"))
            if self.channels not in (1, 3):
                out.append((prefix + "channels", "synthetic shapes render 1 or 3 channels"))
        if self.kind == "image-folder" and not self.root:
            out.append((prefix + "root", "image-folder datasets need a root directory"))
        if self.image_size < 4:
            out.append((prefix + "image_size", "image_size must be >= 4"))
        if self.train_size < 0 or self.test_size < 0:
            out.append((prefix + "train_size", "split sizes must be non-negative"))
        return out

    def split_size(self, split: str) -> int:
        return self.train_size if split == "train" else self.test_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageSet:
    """Images ``(n, c, h, w)`` in ``[0, 1]`` with integer labels ``(n,)``."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "ImageSet":
        return ImageSet(self.images[:n], self.labels[:n])


def _shape_mask(kind: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r = np.hypot(x, y)
    if kind == "disk":
        return r < 1.0
    if kind == "square":
        return np.maximum(np.abs(x), np.abs(y)) < 0.8
    if kind == "triangle":
        s3 = np.sqrt(3.0)
        return (y > -0.55) & (s3 * x + y < 1.0) & (-s3 * x + y < 1.0)
    if kind == "cross":
        return ((np.abs(x) < 0.3) & (np.abs(y) < 1.0)) | ((np.abs(y) < 0.3) & (np.abs(x) < 1.0))
    if kind == "ring":
        return (r < 1.0) & (r > 0.55)
    if kind == "crescent":
        return (r < 1.0) & (np.hypot(x - 0.5, y) > 0.75)
    raise ValueError(kind)


def _background(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.15, 0.85, size=(channels, 1, 1))
    tex = np.zeros((size, size))
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    tint = rng.uniform(0.5, 1.0, size=(channels, 1, 1))
    img = base + TEXTURE_AMP * tint * tex + NOISE_AMP * rng.standard_normal((channels, size, size))
    return img


def render_shape(spec: DatasetSpec, index: int, split: str = "train") -> tuple[np.ndarray, int]:
    """Render one image; the label cycles through the classes with the index."""
    size = spec.image_size
    rng = np.random.default_rng([spec.seed, _SPLIT_CODE[split], index])
    label = index % spec.num_classes
    img = _background(rng, size, spec.channels)

    hi = size * _SUPERSAMPLE
    yy, xx = (np.mgrid[0:hi, 0:hi] + 0.5) / hi * 2.0 - 1.0
    scale = rng.uniform(*SCALE_RANGE)
    cx, cy = rng.uniform(-0.9 + scale, 0.9 - scale, size=2)
    theta = rng.uniform(0, 2 * np.pi)
    u, v = (xx - cx) / scale, (yy - cy) / scale
    xr = np.cos(theta) * u + np.sin(theta) * v
    yr = -np.sin(theta) * u + np.cos(theta) * v
    mask = _shape_mask(SHAPES[label], xr, yr).astype(np.float64)
    cover = mask.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))

    color = rng.uniform(0.0, 1.0, size=(spec.channels, 1, 1))
    # keep the shape visible against the background mean
    bg_mean = img.mean(axis=(1, 2), keepdims=True)
    gap = color - bg_mean
    color = np.where(np.abs(gap) < 0.25, bg_mean + np.where(gap >= 0, 0.25, -0.25), color)
    img = img * (1 - cover) + color * cover
    return np.clip(img, 0.0, 1.0).astype(np.float32), int(label)


def synth_dataset(spec: DatasetSpec, index: int, split: str = "train") -> tuple[np.ndarray, int]:
    """``(image, label)`` for one index of a synthetic split.

    Raises:
        IndexError: if ``index`` is outside the split.
    """
    n = spec.split_size(split)
    if not 0 <= index < n:
        raise IndexError(f"index {index} outside {split} split of size {n}")
    return render_shape(spec, index, split)


def _load_folder(spec: DatasetSpec, split: str) -> ImageSet:
    from PIL import Image

    root = Path(spec.root) / split
    if not root.is_dir():
        raise ConfigError([("dataset.root", f"missing split directory {root}")])
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for label, name in enumerate(classes):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp", ".pgm", ".ppm"):
                continue
            mode = "L" if spec.channels == 1 else "RGB"
            im = Image.open(path).convert(mode).resize((spec.image_size, spec.image_size))
            arr = np.asarray(im, dtype=np.float32) / 255.0
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            images.append(arr)
            labels.append(label)
    limit = spec.split_size(split)
    if limit and len(labels) > limit:
        # interleave classes before truncating so every class keeps examples
        labels_arr = np.asarray(labels)
        rank = np.zeros(len(labels), np.int64)
        for c in np.unique(labels_arr):
            rank[labels_arr == c] = np.arange(np.sum(labels_arr == c))
        keep = np.lexsort((labels_arr, rank))[:limit]
        images, labels = [images[i] for i in keep], [labels[i] for i in keep]
    log.info("loaded %d images from %s", len(labels), root)
    shape = (0, spec.channels, spec.image_size, spec.image_size)
    return ImageSet(np.stack(images) if images else np.zeros(shape, np.float32),
                    np.asarray(labels, dtype=np.int64))


def load_split(spec: DatasetSpec, split: str) -> ImageSet:
    if spec.kind == "image-folder":
        return _load_folder(spec, split)
    n = spec.split_size(split)
    images = np.zeros((n, spec.channels, spec.image_size, spec.image_size), np.float32)
    labels = np.zeros(n, np.int64)
    for i in range(n):
        images[i], labels[i] = render_shape(spec, i, split)
    return ImageSet(images, labels)

"""Decode, resize and z-score normalize images."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageOps

from .errors import EmptyStream, ZeroDimensionInput

EPS = 1e-7
INPUT_SIZE = (224, 224)


class Space(str, Enum):
    RAW = "raw_pixels"
    NORMALIZED = "normalized"


@dataclass
class ImageTensor:
    data: np.ndarray  # C x H x W
    space: Space = Space.RAW
    source_id: str | None = None

    def __post_init__(self):
        self.space = Space(self.space)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"expected a 3 x H x W array, got shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


def decode(source, source_id: str | None = None) -> ImageTensor:
    """Decode a path or raw bytes to RGB in [0, 1], honouring EXIF orientation."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    with Image.open(source) as im:
        im = ImageOps.exif_transpose(im).convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return ImageTensor(np.ascontiguousarray(arr.transpose(2, 0, 1)), Space.RAW, source_id)


def resize(img: ImageTensor, target=INPUT_SIZE) -> ImageTensor:
    """Bilinear stretch to ``target`` (H, W); aspect ratio is not preserved."""
    c, h, w = img.shape
    if h == 0 or w == 0 or target[0] <= 0 or target[1] <= 0:
        raise ZeroDimensionInput(f"cannot resize {img.shape} to {target}")
    if (h, w) == tuple(target):
        return ImageTensor(img.data.copy(), img.space, img.source_id)
    t = torch.from_numpy(np.asarray(img.data, dtype=np.float64))[None]
    out = F.interpolate(t, size=tuple(target), mode="bilinear", align_corners=False)
    return ImageTensor(out[0].numpy().astype(img.data.dtype), img.space, img.source_id)


@dataclass
class NormStats:
    mean: list[float]
    std: list[float]
    n: int = 0

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std],
                "n": int(self.n)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(list(map(float, d["mean"])), list(map(float, d["std"])), int(d["n"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


# Per-channel statistics of the pretraining corpus, selectable instead of
# statistics fitted on the training split.
IMAGENET_STATS = NormStats([0.485, 0.456, 0.406], [0.229, 0.224, 0.225], 0)


@dataclass
class NormAccumulator:
    """Streaming per-channel count/mean/M2 (Chan et al. parallel update).

    ``merge`` lets shards be reduced in a fixed order, giving deterministic
    results regardless of how images were partitioned.
    """

    count: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    m2: np.ndarray = field(default_factory=lambda: np.zeros(3))
    images: int = 0

    def update(self, img: ImageTensor) -> "NormAccumulator":
        if img.space is not Space.RAW:
            raise ValueError("normalization statistics are fitted on raw pixels only")
        x = np.asarray(img.data, dtype=np.float64).reshape(3, -1)
        n_b = x.shape[1]
        mean_b = x.mean(axis=1)
        m2_b = ((x - mean_b[:, None]) ** 2).sum(axis=1)
        self._combine(n_b, mean_b, m2_b)
        self.images += 1
        return self

    def merge(self, other: "NormAccumulator") -> "NormAccumulator":
        self._combine(other.count, other.mean, other.m2)
        self.images += other.images
        return self

    def _combine(self, n_b, mean_b, m2_b):
        if n_b == 0:
            return
        n_a = self.count
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + delta ** 2 * (n_a * n_b / n)
        self.count = n

    def result(self, scalar: bool = False) -> NormStats:
        if self.count == 0:
            raise EmptyStream("no training images to fit normalization statistics on")
        if scalar:
            # pooled over channels; every channel has the same pixel count
            mean = float(self.mean.mean())
            m2 = float(self.m2.sum() + (self.count * (self.mean - mean) ** 2).sum())
            std = float(np.sqrt(m2 / (3 * self.count)))
            return NormStats([mean] * 3, [std] * 3, self.images)
        std = np.sqrt(self.m2 / self.count)
        return NormStats(self.mean.tolist(), std.tolist(), self.images)


def fit_norm_stats(train_imgs: Iterable[ImageTensor], scalar: bool = False) -> NormStats:
    """Population mean/std over every pixel of every training image."""
    acc = NormAccumulator()
    for img in train_imgs:
        acc.update(img)
    return acc.result(scalar=scalar)


def apply_norm(img: ImageTensor, stats: NormStats) -> ImageTensor:
    if img.space is not Space.RAW:
        raise ValueError("image is already normalized")
    mean = np.asarray(stats.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(stats.std, dtype=np.float64)[:, None, None]
    out = (np.asarray(img.data, dtype=np.float64) - mean) / (std + EPS)
    return ImageTensor(out.astype(np.float32), Space.NORMALIZED, img.source_id)


def load_resized(source, size=INPUT_SIZE, source_id: str | None = None) -> ImageTensor:
    return resize(decode(source, source_id), size)


def prepare(source, stats: NormStats, size=INPUT_SIZE, source_id: str | None = None) -> torch.Tensor:
    """Full inference-time path: decode, resize, normalize, to a 3 x H x W tensor.

    Training, offline evaluation and the HTTP service all go through here.
    """
    img = apply_norm(load_resized(source, size, source_id), stats)
    return torch.from_numpy(img.data)

"""Synthetic mammogram-like images with known breast masks.

Each image holds a half-ellipse "breast" attached to one side edge over a dark
noisy background, plus a small bright label mark in a far corner (the kind of
artifact segmentation must discard). Malignant images add a bright Gaussian
mass and a cluster of bright speckles (microcalcification analog) inside the
breast.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .manifest import DatasetManifest, ManifestEntry
from .pgm import write_pgm
from .preprocess import GrayImage, Laterality

BENIGN, MALIGNANT = 0, 1


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: Tuple[int, int] = (128, 128)  # (height, width)
    mass_intensity: Tuple[float, float] = (70.0, 110.0)  # peak added gray levels
    mass_radius: Tuple[float, float] = (6.0, 10.0)  # Gaussian sigma, pixels
    speckle_count: Tuple[int, int] = (4, 10)
    background_noise: float = 4.0  # std of background gray levels
    breast_intensity: Tuple[float, float] = (118.0, 128.0)
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValueError("synthetic images must be at least 32x32")
        for name in ("mass_intensity", "mass_radius", "speckle_count", "breast_intensity"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.background_noise < 0:
            raise ValueError("background_noise must be non-negative")


@dataclass
class SyntheticSet:
    images: List[GrayImage]
    labels: List[int]
    masks: List[np.ndarray]  # ground-truth breast masks, in each image's own frame

    def __len__(self) -> int:
        return len(self.images)

    def write(self, out_dir, split: str = "train", prefix: str = "") -> DatasetManifest:
        """Write every image as PGM under ``out_dir`` and return the matching manifest."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (img, label) in enumerate(zip(self.images, self.labels)):
            path = out_dir / f"{prefix}{split}_{i:05d}.pgm"
            write_pgm(path, img.pixels)
            entries.append(ManifestEntry(path, label, img.laterality, split))
        return DatasetManifest(entries)


def _render(spec: SyntheticSpec, label: int, rng: np.random.Generator):
    h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    img = 12.0 + spec.background_noise * rng.standard_normal((h, w))

    # breast: half ellipse on the left edge
    cy = rng.uniform(0.45, 0.55) * h
    ry = rng.uniform(0.32, 0.44) * h
    rx = rng.uniform(0.55, 0.78) * w
    r2 = ((yy - cy) / ry) ** 2 + (xx / rx) ** 2
    breast = r2 <= 1.0
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), 2.0)
    texture *= 6.0 / max(texture.std(), 1e-12)
    base = rng.uniform(*spec.breast_intensity)
    tissue = base * (1.0 - 0.15 * r2) + texture
    img[breast] = tissue[breast]

    # label mark near the right edge, clear of the breast
    mh, mw = int(rng.integers(5, 9)), int(rng.integers(10, 16))
    my = int(rng.integers(2, 10)) if rng.random() < 0.5 else h - mh - int(rng.integers(2, 10))
    mx = w - mw - int(rng.integers(2, 6))
    img[my:my + mh, mx:mx + mw] = rng.uniform(200, 240)

    if label == MALIGNANT:
        # mass centre well inside the breast
        rho, phi = 0.55 * np.sqrt(rng.random()), rng.uniform(-np.pi / 2, np.pi / 2)
        my_c = cy + rho * ry * np.sin(phi)
        mx_c = rho * rx * np.cos(phi) + 0.1 * rx
        sigma = rng.uniform(*spec.mass_radius)
        amp = rng.uniform(*spec.mass_intensity)
        img += amp * np.exp(-((yy - my_c) ** 2 + (xx - mx_c) ** 2) / (2 * sigma ** 2)) * breast
        lo, hi = spec.speckle_count
        for _ in range(int(rng.integers(lo, hi + 1))):
            sy = int(round(my_c + rng.normal(0, 1.5 * sigma)))
            sx = int(round(mx_c + rng.normal(0, 1.5 * sigma)))
            if 0 <= sy < h and 0 <= sx < w and breast[sy, sx]:
                img[sy, sx] += rng.uniform(60, 100)

    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return pixels, breast


def generate_synthetic(spec: SyntheticSpec, count_per_class: int, stream: int = 0) -> SyntheticSet:
    """Class-balanced synthetic set; labels alternate benign/malignant.

    Image ``i`` draws from ``default_rng([seed, stream, i])`` so the content of
    an image depends only on the spec seed, the stream id and its index.
    Roughly half the images are right breasts (mirrored, laterality R).
    """
    if count_per_class < 1:
        raise ValueError("count_per_class must be >= 1")
    images, labels, masks = [], [], []
    for i in range(2 * count_per_class):
        rng = np.random.default_rng([spec.seed, stream, i])
        label = i % 2
        pixels, mask = _render(spec, label, rng)
        laterality = Laterality.RIGHT if rng.random() < 0.5 else Laterality.LEFT
        if laterality is Laterality.RIGHT:
            pixels, mask = pixels[:, ::-1].copy(), mask[:, ::-1].copy()
        images.append(GrayImage(pixels, laterality))
        labels.append(label)
        masks.append(mask)
    return SyntheticSet(images, labels, masks)

"""Breast-region extraction: Otsu threshold, largest component, mirroring, crop/resize."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

# 8-connectivity
_EIGHT = np.ones((3, 3), dtype=bool)


class Laterality(str, enum.Enum):
    LEFT = "L"
    RIGHT = "R"
    UNKNOWN = "U"


class PreprocessError(ValueError):
    """A preprocessing failure, tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class GrayImage:
    pixels: np.ndarray  # (height, width) uint8
    laterality: Laterality = Laterality.UNKNOWN

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"GrayImage needs a 2-D raster, got shape {px.shape}")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise ValueError("pixel values must lie in 0..255")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "laterality", Laterality(self.laterality))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel coordinates; x is the column, y the row."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1 or min(self.x0, self.y0) < 0:
            raise ValueError(f"degenerate bounding box {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1

    def fits(self, width: int, height: int) -> bool:
        return self.x1 < width and self.y1 < height


def _histogram(pixels: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(pixels, dtype=np.uint8).ravel(), minlength=256)


def otsu_threshold(hist: np.ndarray) -> int | None:
    """Gray level t maximizing between-class variance of {<= t} vs {> t}.

    Works in exact integer arithmetic: with n0 pixels of total intensity s0 at
    or below t (n, s overall), the between-class variance is proportional to
    (n*s0 - s*n0)**2 / (n0 * (n - n0)). Ties go to the smallest t. Returns
    None when no split has positive variance (a constant image).
    """
    hist = [int(v) for v in np.asarray(hist).ravel()]
    if len(hist) != 256:
        raise ValueError("histogram must have 256 bins")
    n = sum(hist)
    s = sum(level * count for level, count in enumerate(hist))
    best_t, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for t in range(256):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (n * s0 - s * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def threshold_segment(image: GrayImage) -> np.ndarray:
    """Foreground mask of pixels strictly above the Otsu threshold.

    A constant image yields an empty mask.
    """
    if image.pixels.size == 0:
        raise PreprocessError("threshold", "zero-area image")
    t = otsu_threshold(_histogram(image.pixels))
    if t is None:
        return np.zeros(image.pixels.shape, dtype=bool)
    return image.pixels > t


def mask_bbox(mask: np.ndarray) -> BoundingBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise PreprocessError("components", "no breast region found")
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def largest_component(mask: np.ndarray) -> Tuple[np.ndarray, BoundingBox]:
    """Keep the largest 8-connected foreground component and return its tight box.

    Equal-sized components are resolved toward the one whose first pixel comes
    earliest in row-major scan order.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=_EIGHT)
    if count == 0:
        raise PreprocessError("components", "no breast region found")
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count + 1)
    sizes[0] = 0
    candidates = np.flatnonzero(sizes == sizes.max())
    if candidates.size > 1:
        _, first_seen = np.unique(flat, return_index=True)  # index 0 is background
        keep = candidates[np.argmin(first_seen[candidates])]
    else:
        keep = candidates[0]
    component = labels == keep
    return component, mask_bbox(component)


def mirror_if_right(image: GrayImage) -> GrayImage:
    """Flip right-breast images horizontally so the breast sits on the left."""
    if image.laterality is Laterality.RIGHT:
        return GrayImage(image.pixels[:, ::-1].copy(), Laterality.LEFT)
    if image.laterality is Laterality.UNKNOWN:
        log.debug("laterality unknown; image left unmirrored")
    return image


def bilinear_resize(raster: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and edge clamping."""
    raster = np.asarray(raster, dtype=np.float64)
    out_h, out_w = size
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {size}")

    def axis(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(raster.shape[0], out_h)
    x0, x1, fx = axis(raster.shape[1], out_w)
    rows = raster[y0] * (1.0 - fy)[:, None] + raster[y1] * fy[:, None]
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def crop_normalize(image: GrayImage, box: BoundingBox, target: Tuple[int, int]) -> np.ndarray:
    """Crop to ``box``, resize to ``target`` (H, W) and scale to [0, 1]; shape (1, H, W)."""
    if not box.fits(image.width, image.height):
        raise PreprocessError("crop", f"{box} lies outside a {image.width}x{image.height} image")
    crop = image.pixels[box.y0:box.y1 + 1, box.x0:box.x1 + 1]
    return (bilinear_resize(crop, target) / 255.0)[None]


class PipelineResult(NamedTuple):
    tensor: np.ndarray
    mask: np.ndarray  # breast component in the mirrored frame
    box: BoundingBox
    image: GrayImage  # after mirroring


def preprocess_detailed(image: GrayImage, target: Tuple[int, int]) -> PipelineResult:
    """Mirror, segment, keep the largest component, crop and normalize."""
    image = mirror_if_right(image)
    component, box = largest_component(threshold_segment(image))
    return PipelineResult(crop_normalize(image, box, target), component, box, image)


def preprocess_pipeline(image: GrayImage, target: Tuple[int, int] = (64, 64)) -> np.ndarray:
    return preprocess_detailed(image, target).tensor

"""Foreground masks and edge-structure maps for real images.

The mask chain runs detector -> segmenter and falls back to whole-image
matting, so every image either gets a usable foreground mask or raises.
Edge maps are computed on the image with background pixels zeroed and then
clipped to the mask, which keeps structure guidance strictly inside the
object region.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import cv2
import numpy as np
from PIL import Image

from .core import PipelineError

BINARIZE_THRESHOLD = 0.5
DETECTOR_CONFIDENCE_FLOOR = 0.3
CANNY_LOW_DEFAULT = 100
CANNY_HIGH_DEFAULT = 200


class EmptyMaskError(PipelineError):
    """Every backend produced an empty mask; the image cannot be edited."""


@dataclass(frozen=True)
class Bbox:
    x0: int
    y0: int
    x1: int
    y1: int
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0,1]")

    def clipped(self, width: int, height: int) -> "Bbox":
        return Bbox(
            max(0, self.x0), max(0, self.y0),
            min(width, self.x1), min(height, self.y1),
            self.confidence,
        )


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary (0/1) uint8 raster with the same height/width as its image."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.dtype != np.uint8:
            raise ValueError("mask must be a 2-D uint8 array")
        bad = (self.data > 1).any()
        if bad:
            raise ValueError("mask values must be 0 or 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return not self.data.any()

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Mask) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class CannyMap:
    """Binary edge raster; nonzero only inside the foreground mask."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.dtype != np.uint8:
            raise ValueError("canny map must be a 2-D uint8 array")
        if (self.data > 1).any():
            raise ValueError("canny map values must be 0 or 1")

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CannyMap) and np.array_equal(self.data, other.data)


class DetectorBackend(Protocol):
    def detect(self, image: np.ndarray, class_name: str) -> Bbox | None: ...


class SegmenterBackend(Protocol):
    def segment(self, image: np.ndarray, bbox: Bbox) -> np.ndarray: ...


class MattingBackend(Protocol):
    def matte(self, image: np.ndarray) -> np.ndarray: ...


def binarize(soft_mask: np.ndarray, threshold: float = BINARIZE_THRESHOLD) -> Mask:
    """Threshold a [0,1] soft mask; pixels >= threshold become 1."""
    soft = np.asarray(soft_mask, dtype=np.float64)
    if soft.min() < 0.0 or soft.max() > 1.0:
        raise ValueError("soft mask values must lie in [0,1]")
    return Mask((soft >= threshold).astype(np.uint8))


def dilate_mask(mask: Mask, factor_px: int) -> Mask:
    """Grow the mask by factor_px in every direction (square element)."""
    if factor_px < 0:
        raise ValueError("dilation factor must be >= 0")
    if factor_px == 0:
        return Mask(mask.data.copy())
    side = 2 * factor_px + 1
    kernel = np.ones((side, side), dtype=np.uint8)
    return Mask(cv2.dilate(mask.data, kernel))


def invert_mask(mask: Mask) -> Mask:
    return Mask((1 - mask.data).astype(np.uint8))


def intersect_masks(a: Mask, b: Mask) -> Mask:
    return Mask((a.data & b.data).astype(np.uint8))


def canny_from_foreground(
    image: np.ndarray,
    mask: Mask,
    low_thresh: int = CANNY_LOW_DEFAULT,
    high_thresh: int = CANNY_HIGH_DEFAULT,
) -> CannyMap:
    """Edges of the background-zeroed image, clipped to the mask."""
    if image.shape[:2] != mask.shape:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    if mask.is_empty():
        return CannyMap(np.zeros(mask.shape, dtype=np.uint8))
    foreground = image * mask.data[:, :, None]
    edges = cv2.Canny(foreground, low_thresh, high_thresh)
    binary = (edges > 0).astype(np.uint8) & mask.data
    return CannyMap(binary)


def foreground_mask(
    image: np.ndarray,
    class_name: str,
    detector: DetectorBackend,
    segmenter: SegmenterBackend,
    matting: MattingBackend,
    threshold: float = BINARIZE_THRESHOLD,
    confidence_floor: float = DETECTOR_CONFIDENCE_FLOOR,
) -> Mask:
    """Detector-guided segmentation with matting as the safety net.

    A confident detection hands its box to the segmenter; a miss, a
    low-confidence box, or an empty segmenter mask falls through to matting.
    Raises :class:`EmptyMaskError` when matting also produces nothing.
    """
    if image.size == 0:
        raise ValueError("empty image")
    height, width = image.shape[:2]

    box = detector.detect(image, class_name)
    if box is not None and box.confidence >= confidence_floor:
        soft = segmenter.segment(image, box.clipped(width, height))
        mask = binarize(soft, threshold)
        if not mask.is_empty():
            return mask

    mask = binarize(matting.matte(image), threshold)
    if mask.is_empty():
        raise EmptyMaskError(f"no foreground found for class {class_name!r}")
    return mask


def save_mask(mask: Mask | CannyMap, path: str | Path) -> None:
    """Persist as a single-channel lossless raster (0/255)."""
    Image.fromarray(mask.data * 255, mode="L").save(Path(path))


def load_mask(path: str | Path) -> Mask:
    raster = np.asarray(Image.open(Path(path)).convert("L"))
    return Mask((raster >= 128).astype(np.uint8))


def load_canny(path: str | Path) -> CannyMap:
    raster = np.asarray(Image.open(Path(path)).convert("L"))
    return CannyMap((raster >= 128).astype(np.uint8))

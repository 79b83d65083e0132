"""Yellow-pixel segmentation inside annotated boxes via HSV thresholds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import RectOutOfBounds
from .geometry import AnnotatedImage, WindowRect
from .imageio import load_image_pixels


@dataclass(frozen=True)
class HsvThresholds:
    """Yellow band: ``h_min <= h <= h_max`` (degrees), ``s >= s_min``, ``v >= v_min``."""

    h_min: float = 40.0
    h_max: float = 70.0
    s_min: float = 0.25
    v_min: float = 0.30

    def __post_init__(self):
        if not 0 <= self.h_min < self.h_max <= 360:
            raise ValueError(f"need 0 <= h_min < h_max <= 360, got {self.h_min}, {self.h_max}")
        for name in ("s_min", "v_min"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def select(self, hsv: np.ndarray) -> np.ndarray:
        h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
        return (h >= self.h_min) & (h <= self.h_max) & (s >= self.s_min) & (v >= self.v_min)


def rgb_to_hsv_array(rgb: np.ndarray) -> np.ndarray:
    """Hexcone RGB->HSV for 8-bit ``(..., 3)`` arrays.

    Hue is in degrees ``[0, 360)`` and is 0 for greys; saturation and value
    are in ``[0, 1]``.
    """
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)

    h = np.where(
        mx == r, np.mod((g - b) / safe, 6.0),
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    ) * 60.0
    h = np.where(delta > 0, h, 0.0)
    h = np.where(h >= 360.0, h - 360.0, h)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def rgb_to_hsv(pixel) -> tuple[float, float, float]:
    h, s, v = rgb_to_hsv_array(np.asarray(pixel).reshape(1, 3))[0]
    return float(h), float(s), float(v)


@dataclass(frozen=True)
class PixelMask:
    bits: np.ndarray

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def count_true(self) -> int:
        return int(np.count_nonzero(self.bits))

    def count_in(self, rect: WindowRect) -> int:
        return int(np.count_nonzero(self.bits[rect.y0:rect.y1, rect.x0:rect.x1]))


def abnormal_pixel_mask(img: AnnotatedImage, thresholds: HsvThresholds = HsvThresholds(),
                        pixels: Optional[np.ndarray] = None) -> PixelMask:
    """Yellow pixels inside the union of ``img``'s boxes.

    Only box regions are converted to HSV, so memory stays proportional to
    the annotated area. Pixels covered by several boxes are counted once.
    """
    bits = np.zeros((img.height, img.width), dtype=bool)
    if not img.boxes:
        return PixelMask(bits)
    if pixels is None:
        pixels = load_image_pixels(img)
    if pixels.shape[:2] != (img.height, img.width):
        raise ValueError(f"{img.image_id}: pixel array {pixels.shape} does not match image size")
    for b in img.boxes:
        region = pixels[b.y:b.y1, b.x:b.x1]
        bits[b.y:b.y1, b.x:b.x1] |= thresholds.select(rgb_to_hsv_array(region))
    return PixelMask(bits)


def pixel_probability_ground_truth(img: AnnotatedImage, thresholds: HsvThresholds = HsvThresholds(),
                                   pixels: Optional[np.ndarray] = None,
                                   mask: Optional[PixelMask] = None) -> float:
    """Percentage (0-100) of the image's pixels segmented as abnormal."""
    if mask is None:
        mask = abnormal_pixel_mask(img, thresholds, pixels)
    return 100.0 * mask.count_true / (img.width * img.height)


def window_pixel_target(img: AnnotatedImage, rect: WindowRect,
                        thresholds: HsvThresholds = HsvThresholds(),
                        pixels: Optional[np.ndarray] = None,
                        mask: Optional[PixelMask] = None) -> float:
    """Fraction in ``[0, 1]`` of a window's pixels segmented as abnormal."""
    if not rect.fits_inside(img.width, img.height):
        raise RectOutOfBounds(f"{rect} lies outside {img.image_id} ({img.width}x{img.height})")
    if mask is None:
        mask = abnormal_pixel_mask(img, thresholds, pixels)
    return mask.count_in(rect) / float(rect.side * rect.side)

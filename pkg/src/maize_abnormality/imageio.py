"""Reading and writing RGB pixel data."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import ImageDecodeError

# field images are ~24 MP; lift Pillow's decompression-bomb guard above that
Image.MAX_IMAGE_PIXELS = max(Image.MAX_IMAGE_PIXELS or 0, 200_000_000)


def load_rgb(path, box=None) -> np.ndarray:
    """Decode ``path`` to an ``(H, W, 3)`` uint8 array.

    ``box`` is an optional ``(left, top, right, bottom)`` crop applied
    before conversion.
    """
    try:
        with Image.open(path) as im:
            if box is not None:
                left, top, right, bottom = box
                if left < 0 or top < 0 or right > im.width or bottom > im.height:
                    raise ImageDecodeError(f"{path}: region {box} exceeds {im.width}x{im.height}")
                im = im.crop(box)
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc


def load_image_pixels(img) -> np.ndarray:
    """Pixels of an :class:`~maize_abnormality.geometry.AnnotatedImage`.

    Quarter images are cut out of their parent's file using ``img.offset``.
    """
    ox, oy = img.offset
    pixels = load_rgb(img.path, box=(ox, oy, ox + img.width, oy + img.height))
    if pixels.shape[:2] != (img.height, img.width):
        raise ImageDecodeError(
            f"{img.image_id}: decoded region {pixels.shape[1]}x{pixels.shape[0]} "
            f"does not match {img.width}x{img.height}")
    return pixels


def save_rgb(pixels: np.ndarray, path) -> None:
    """Write an RGB array losslessly (PNG)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def save_mask(bits: np.ndarray, path) -> None:
    """Write a boolean mask as a 1-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(bits, dtype=bool)).convert("1").save(path, format="PNG")

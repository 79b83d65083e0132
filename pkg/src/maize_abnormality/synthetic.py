"""Synthetic field imagery for smoke runs and tests.

Backgrounds are noisy canopy green; abnormal regions are painted pure-ish
yellow well inside the default HSV yellow band.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import BoundingBox, box_to_percent
from .imageio import save_rgb

GREEN = (60, 140, 45)
YELLOW = (235, 215, 20)


def green_background(height: int, width: int, rng: np.random.Generator, noise: int = 12) -> np.ndarray:
    base = np.array(GREEN, dtype=np.int16)
    img = base + rng.integers(-noise, noise + 1, size=(height, width, 3), dtype=np.int16)
    return np.clip(img, 0, 255).astype(np.uint8)


def paint(pixels: np.ndarray, box: BoundingBox, color=YELLOW) -> None:
    pixels[box.y:box.y1, box.x:box.x1] = color


def make_tile_corpus(n: int, side: int = 250, seed: int = 0, patch=(20, 80)):
    """Balanced tiles: plain green (label 0) vs green with a yellow patch (label 1)."""
    rng = np.random.default_rng(seed)
    X = np.empty((n, side, side, 3), dtype=np.uint8)
    y = np.arange(n) % 2
    for i in range(n):
        X[i] = green_background(side, side, rng)
        if y[i]:
            w, h = rng.integers(patch[0], patch[1] + 1, size=2)
            x0, y0 = rng.integers(0, side - w + 1), rng.integers(0, side - h + 1)
            paint(X[i], BoundingBox(int(x0), int(y0), int(w), int(h)))
    return X, y


def make_fraction_corpus(n: int, side: int = 250, seed: int = 0):
    """Tiles whose top ``round(t * side)`` rows are yellow, for latent ``t ~ U(0.05, 0.95)``.

    Returns tiles and their exact yellow fractions (an affine function of ``t``
    up to row rounding).
    """
    rng = np.random.default_rng(seed)
    X = np.empty((n, side, side, 3), dtype=np.uint8)
    frac = np.empty(n)
    for i in range(n):
        rows = int(round(rng.uniform(0.05, 0.95) * side))
        X[i] = green_background(side, side, rng)
        X[i, :rows] = YELLOW
        frac[i] = rows / side
    return X, frac


def write_field_dataset(root, n_images: int = 4, width: int = 1000, height: int = 1000,
                        boxes_per_image: int = 3, box_size=(40, 120), seed: int = 0,
                        n_test: int = 2) -> dict:
    """Write synthetic field images, a Label Studio export and a split map.

    Returns a dict with the paths of the export, the images root and the split
    map, plus the generated boxes keyed by image id.
    """
    root = Path(root)
    images_root = root / "images"
    rng = np.random.default_rng(seed)
    tasks, split_map, boxes_by_id = [], {}, {}
    for i in range(n_images):
        image_id = f"field_{i:03d}"
        pixels = green_background(height, width, rng)
        boxes = []
        for _ in range(boxes_per_image):
            w, h = (int(v) for v in rng.integers(box_size[0], box_size[1] + 1, size=2))
            x, y = int(rng.integers(0, width - w + 1)), int(rng.integers(0, height - h + 1))
            box = BoundingBox(x, y, w, h)
            # yellow fills the box's central region only, like a leaf inside its box
            inner = BoundingBox(x + w // 4, y + h // 4, max(1, w // 2), max(1, h // 2))
            paint(pixels, inner)
            boxes.append(box)
        stage = "V8" if i % 2 == 0 else "V12"
        save_rgb(pixels, images_root / stage / f"{image_id}.png")
        results = []
        for j, b in enumerate(boxes):
            px, py, pw, ph = box_to_percent(b, width, height)
            results.append({
                "id": f"{image_id}-{j}", "type": "rectanglelabels", "from_name": "label", "to_name": "image",
                "original_width": width, "original_height": height, "image_rotation": 0,
                "value": {"x": px, "y": py, "width": pw, "height": ph, "rotation": 0,
                          "rectanglelabels": ["abnormal"]},
            })
        tasks.append({"id": i + 1, "data": {"image": f"/data/local-files/?d={stage}/{image_id}.png"},
                      "annotations": [{"id": i + 1, "was_cancelled": False, "result": results}]})
        split_map[image_id] = "B_test" if i >= n_images - n_test else "A_train"
        boxes_by_id[image_id] = boxes
    export = root / "export.json"
    export.write_text(json.dumps(tasks, indent=2))
    split_path = root / "splits.json"
    split_path.write_text(json.dumps(split_map, indent=2, sort_keys=True))
    return {"export": export, "images_root": images_root, "split_map": split_path, "boxes": boxes_by_id}

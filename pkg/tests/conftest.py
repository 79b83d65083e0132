import numpy as np
import pytest
from hypothesis import settings

from maize_abnormality.geometry import AnnotatedImage, BoundingBox, Split
from maize_abnormality.imageio import save_rgb

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def rasterize(box, width, height):
    """Boolean occupancy grid of a box; the independent oracle for geometry tests."""
    grid = np.zeros((height, width), dtype=bool)
    for yy in range(box.y, box.y + box.h):
        for xx in range(box.x, box.x + box.w):
            if 0 <= xx < width and 0 <= yy < height:
                grid[yy, xx] = True
    return grid


def make_image(tmp_path, width, height, boxes=(), pixels=None, image_id="img", split=Split.A_TRAIN):
    if pixels is None:
        pixels = np.zeros((height, width, 3), dtype=np.uint8)
        pixels[..., 1] = 120
    path = tmp_path / f"{image_id}.png"
    save_rgb(pixels, path)
    return AnnotatedImage(image_id=image_id, path=str(path), width=width, height=height,
                          boxes=tuple(boxes), split=split)


@pytest.fixture
def image_factory(tmp_path):
    def factory(width, height, boxes=(), pixels=None, image_id="img", split=Split.A_TRAIN):
        return make_image(tmp_path, width, height, boxes, pixels, image_id, split)
    return factory


@pytest.fixture
def virtual_image():
    """AnnotatedImage with no pixel file, for pure-geometry tests."""
    def factory(width, height, boxes=(), image_id="v", split=Split.A_TRAIN):
        return AnnotatedImage(image_id=image_id, path="/nonexistent.png", width=width, height=height,
                              boxes=tuple(BoundingBox(*b) if not isinstance(b, BoundingBox) else b
                                          for b in boxes), split=split)
    return factory

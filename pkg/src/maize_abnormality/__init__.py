"""Abnormality identification and quantification in UAV images of maize fields."""

from .geometry import (
    AnnotatedImage,
    BoundingBox,
    GrowthStage,
    Split,
    WindowRect,
    contains,
    ingest_annotations,
    intersects,
    quarter_image,
)
from .quantification import (
    PIXEL_THRESHOLDS,
    WINDOW_THRESHOLDS,
    Category,
    CategoryThresholds,
    Method,
    QuantificationResult,
    categorize,
    pearson_correlation,
    per_category_accuracy,
    window_probability,
)
from .segmentation import HsvThresholds, abnormal_pixel_mask, pixel_probability_ground_truth, rgb_to_hsv
from .tiling import DatasetManifest, Label, TileRecord, grid_windows, sample_random_crops, split_train_validation

__version__ = "0.1.0"

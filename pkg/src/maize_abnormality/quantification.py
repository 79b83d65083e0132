"""Abnormality categories, window probability and evaluation metrics.

Probabilities are percentages in ``[0, 100]``. Category intervals are
half-open with each boundary belonging to the upper category::

    None    x == 0
    Low     0 < x < low_upper
    Medium  low_upper <= x < medium_upper
    High    x >= medium_upper
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .exceptions import CountMismatch, DegenerateVariance, NegativeProbability
from .geometry import DEFAULT_TILE_SIDE, AnnotatedImage
from .segmentation import HsvThresholds, PixelMask, pixel_probability_ground_truth
from .tiling import Label, grid_windows


class Category(IntEnum):
    NONE = 0
    LOW = 1
    MEDIUM = 2
    HIGH = 3

    @property
    def display(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value) -> "Category":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        return cls[str(value).upper()]


class Method(str, Enum):
    WINDOW = "window"
    PIXEL = "pixel"


@dataclass(frozen=True)
class CategoryThresholds:
    method: Method
    low_upper: float
    medium_upper: float

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not 0 < self.low_upper < self.medium_upper:
            raise ValueError(f"need 0 < low_upper < medium_upper, got {self.low_upper}, {self.medium_upper}")


WINDOW_THRESHOLDS = CategoryThresholds(Method.WINDOW, 5.0, 20.0)
PIXEL_THRESHOLDS = CategoryThresholds(Method.PIXEL, 0.0415, 0.80)


def categorize(prob: float, thresholds: CategoryThresholds) -> Category:
    if prob < 0 or math.isnan(prob):
        raise NegativeProbability(f"probability must be >= 0, got {prob}")
    if prob == 0:
        return Category.NONE
    if prob < thresholds.low_upper:
        return Category.LOW
    if prob < thresholds.medium_upper:
        return Category.MEDIUM
    return Category.HIGH


def _is_abnormal(pred) -> bool:
    if hasattr(pred, "label_fused"):
        pred = pred.label_fused
    if isinstance(pred, Label):
        return pred is Label.ABNORMAL
    return bool(pred)


def window_probability(predictions: Sequence, n_windows: int) -> float:
    """Percentage of an image's grid windows predicted abnormal.

    ``predictions`` holds one entry per window: a ``WindowPrediction``
    (its fused label is used), a :class:`Label`, or a truthy flag.
    """
    if n_windows <= 0:
        raise CountMismatch("image has no windows")
    if len(predictions) != n_windows:
        raise CountMismatch(f"{len(predictions)} predictions for {n_windows} windows")
    return 100.0 * sum(_is_abnormal(p) for p in predictions) / n_windows


def truth_window_probability(img: AnnotatedImage, side: int = DEFAULT_TILE_SIDE) -> float:
    windows = grid_windows(img, side)
    return window_probability([label for _, label in windows], len(windows))


def ground_truth_category(img: AnnotatedImage, thresholds: CategoryThresholds,
                          hsv: HsvThresholds = HsvThresholds(), side: int = DEFAULT_TILE_SIDE,
                          pixels: Optional[np.ndarray] = None,
                          mask: Optional[PixelMask] = None) -> Category:
    """Truth category; windows use box intersection, pixels use segmentation."""
    if thresholds.method is Method.WINDOW:
        return categorize(truth_window_probability(img, side), thresholds)
    return categorize(pixel_probability_ground_truth(img, hsv, pixels, mask), thresholds)


@dataclass
class QuantificationResult:
    """Per-image outcome of both quantification methods.

    Window-method fields are None in regression-only runs and vice versa.
    Truth is kept per method because the two truth categories need not
    coincide for the same image.
    """

    image_id: str
    truth_window_prob: float
    truth_pixel_prob: float
    category_truth_window: Category
    category_truth_pixel: Category
    window_prob: Optional[float] = None
    category_window: Optional[Category] = None
    window_prob_svm: Optional[float] = None
    category_window_svm: Optional[Category] = None
    window_prob_cnn: Optional[float] = None
    category_window_cnn: Optional[Category] = None
    pixel_prob: Optional[float] = None
    category_pixel: Optional[Category] = None

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("category_") and getattr(self, f.name) is not None:
                setattr(self, f.name, Category.parse(getattr(self, f.name)))

    def is_consistent(self, window: CategoryThresholds = WINDOW_THRESHOLDS,
                      pixel: CategoryThresholds = PIXEL_THRESHOLDS) -> bool:
        """Stored categories equal the categories of the stored probabilities."""
        pairs = [
            ("truth_window_prob", "category_truth_window", window),
            ("truth_pixel_prob", "category_truth_pixel", pixel),
            ("window_prob", "category_window", window),
            ("window_prob_svm", "category_window_svm", window),
            ("window_prob_cnn", "category_window_cnn", window),
            ("pixel_prob", "category_pixel", pixel),
        ]
        for prob_name, cat_name, thr in pairs:
            prob, cat = getattr(self, prob_name), getattr(self, cat_name)
            if (prob is None) != (cat is None):
                return False
            if prob is not None and categorize(prob, thr) is not cat:
                return False
        return True

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, value in d.items():
            if isinstance(value, Category):
                d[key] = value.display
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "QuantificationResult":
        return cls(**d)


def write_results(results: Iterable[QuantificationResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in sorted(results, key=lambda r: r.image_id):
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def read_results(path) -> list[QuantificationResult]:
    with Path(path).open() as fh:
        return [QuantificationResult.from_dict(json.loads(line)) for line in fh if line.strip()]


# (method, source) -> (predicted probability field, predicted category field)
_PREDICTED = {
    (Method.WINDOW, "fusion"): ("window_prob", "category_window"),
    (Method.WINDOW, "svm"): ("window_prob_svm", "category_window_svm"),
    (Method.WINDOW, "cnn"): ("window_prob_cnn", "category_window_cnn"),
    (Method.PIXEL, "regression"): ("pixel_prob", "category_pixel"),
}


def _predicted_fields(method: Method, source: Optional[str]) -> tuple[str, str]:
    method = Method(method)
    if source is None:
        source = "fusion" if method is Method.WINDOW else "regression"
    try:
        return _PREDICTED[(method, source)]
    except KeyError:
        raise ValueError(f"no {source!r} predictions for the {method.value} method") from None


def per_category_accuracy(results: Sequence[QuantificationResult], method: Method,
                          source: Optional[str] = None) -> dict[Category, float]:
    """Percent of images per truth category whose predicted category matches.

    ``source`` selects the predictor: ``fusion`` (default), ``svm`` or
    ``cnn`` for the window method; ``regression`` for the pixel method.
    Truth categories with no images are omitted.
    """
    method = Method(method)
    _, pred_field = _predicted_fields(method, source)
    truth_field = "category_truth_window" if method is Method.WINDOW else "category_truth_pixel"
    hits, totals = {}, {}
    for r in results:
        truth, pred = getattr(r, truth_field), getattr(r, pred_field)
        if pred is None:
            continue
        totals[truth] = totals.get(truth, 0) + 1
        hits[truth] = hits.get(truth, 0) + int(pred is truth)
    return {c: 100.0 * hits[c] / totals[c] for c in Category if c in totals}


def pearson_correlation(pairs: Sequence[tuple[float, float]]) -> float:
    """Sample Pearson correlation coefficient."""
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise DegenerateVariance("need at least two (x, y) pairs")
    centred = arr - arr.mean(axis=0)
    sxx, syy = (centred ** 2).sum(axis=0)
    if sxx == 0 or syy == 0:
        raise DegenerateVariance("a coordinate has zero variance")
    r = float((centred[:, 0] * centred[:, 1]).sum() / math.sqrt(sxx * syy))
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class BarplotRow:
    image_id: str
    truth_prob: float
    pred_prob: float
    truth_cat: Category
    pred_cat: Category
    method: Method

    @property
    def miss(self) -> bool:
        return self.truth_cat is not self.pred_cat


BARPLOT_COLUMNS = ("image_id", "truth_prob", "pred_prob", "truth_cat", "pred_cat", "method")


def emit_category_barplot_data(results: Sequence[QuantificationResult], method: Method,
                               source: Optional[str] = None) -> dict[Category, list[BarplotRow]]:
    """Truth vs predicted probability per image, grouped by truth category.

    Every category is a key; categories without images map to an empty list.
    """
    method = Method(method)
    pred_prob_field, pred_cat_field = _predicted_fields(method, source)
    truth_prob_field = "truth_window_prob" if method is Method.WINDOW else "truth_pixel_prob"
    truth_cat_field = "category_truth_window" if method is Method.WINDOW else "category_truth_pixel"

    series = {c: [] for c in Category}
    for r in sorted(results, key=lambda r: r.image_id):
        if getattr(r, pred_cat_field) is None:
            continue
        row = BarplotRow(r.image_id, getattr(r, truth_prob_field), getattr(r, pred_prob_field),
                         getattr(r, truth_cat_field), getattr(r, pred_cat_field), method)
        series[row.truth_cat].append(row)
    return series


def write_barplot_csv(series: Mapping[Category, Sequence[BarplotRow]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BARPLOT_COLUMNS)
        for category in Category:
            for row in series.get(category, []):
                writer.writerow([row.image_id, f"{row.truth_prob:.6f}", f"{row.pred_prob:.6f}",
                                 row.truth_cat.display, row.pred_cat.display, row.method.value])
    return path


def read_barplot_csv(path) -> list[BarplotRow]:
    with Path(path).open(newline="") as fh:
        return [
            BarplotRow(r["image_id"], float(r["truth_prob"]), float(r["pred_prob"]),
                       Category.parse(r["truth_cat"]), Category.parse(r["pred_cat"]), Method(r["method"]))
            for r in csv.DictReader(fh)
        ]


def accuracy_table(results: Sequence[QuantificationResult]) -> list[dict]:
    """Per-category accuracies: SVM / CNN / fusion columns plus regression."""
    columns = {
        "svm": per_category_accuracy(results, Method.WINDOW, "svm"),
        "cnn": per_category_accuracy(results, Method.WINDOW, "cnn"),
        "fusion": per_category_accuracy(results, Method.WINDOW, "fusion"),
        "regression": per_category_accuracy(results, Method.PIXEL, "regression"),
    }
    return [
        {"category": c.display, **{name: col.get(c) for name, col in columns.items()}}
        for c in Category
    ]

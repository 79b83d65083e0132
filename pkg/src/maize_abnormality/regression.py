"""Per-window abnormal-pixel fraction regression and image-level aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.decomposition import PCA
from sklearn.ensemble import HistGradientBoostingRegressor
from sklearn.metrics import mean_squared_error, r2_score
from sklearn.utils.validation import check_is_fitted

from .bundles import TrainedModelBundle
from .exceptions import GeometryMismatch, MissingTarget, MixedLabels, NoWindows
from .geometry import DEFAULT_TILE_SIDE, AnnotatedImage
from .imageio import load_image_pixels
from .tiling import DatasetManifest, Label, TileStack, extract_tile_pixels, grid_windows
from .validation import flatten_tiles


@dataclass(frozen=True)
class RegressionConfig:
    iterations: int = 750
    loss: str = "squared_error"
    max_depth: int = 7
    l2_regularization: float = 3.0
    pca_variance: float = 0.99
    learning_rate: float = 0.1
    seed: int = 0
    pixel_scale: float = 1.0 / 255.0

    def __post_init__(self):
        if self.loss == "squared":
            object.__setattr__(self, "loss", "squared_error")
        if self.iterations <= 0 or self.max_depth < 1 or self.l2_regularization < 0:
            raise ValueError("need iterations > 0, max_depth >= 1, l2_regularization >= 0")
        if not 0 < self.pca_variance <= 1:
            raise ValueError("pca_variance must lie in (0, 1]")

    def to_estimator(self) -> "PixelFractionRegressor":
        return PixelFractionRegressor(
            pca_variance=self.pca_variance, max_iter=self.iterations, loss=self.loss,
            max_depth=self.max_depth, l2_regularization=self.l2_regularization,
            learning_rate=self.learning_rate, pixel_scale=self.pixel_scale, random_state=self.seed)


class PixelFractionRegressor(RegressorMixin, BaseEstimator):
    """PCA features -> histogram gradient-boosted trees, output clamped to [0, 1]."""

    def __init__(self, pca_variance=0.99, max_iter=750, loss="squared_error", max_depth=7,
                 l2_regularization=3.0, learning_rate=0.1, pixel_scale=1.0 / 255.0, random_state=0):
        self.pca_variance = pca_variance
        self.max_iter = max_iter
        self.loss = loss
        self.max_depth = max_depth
        self.l2_regularization = l2_regularization
        self.learning_rate = learning_rate
        self.pixel_scale = pixel_scale
        self.random_state = random_state

    def fit(self, X, y):
        Xf, self.tile_shape_ = flatten_tiles(X, self.pixel_scale)
        y = np.asarray(y, dtype=np.float64)
        if len(y) != len(Xf):
            raise ValueError(f"{len(Xf)} tiles but {len(y)} targets")
        self.pca_ = PCA(n_components=self.pca_variance, svd_solver="full", random_state=self.random_state)
        Z = self.pca_.fit_transform(Xf)
        self.n_features_out_ = int(self.pca_.n_components_)
        self.booster_ = HistGradientBoostingRegressor(
            loss=self.loss, max_iter=self.max_iter, max_depth=self.max_depth,
            l2_regularization=self.l2_regularization, learning_rate=self.learning_rate,
            early_stopping=False, random_state=self.random_state)
        self.booster_.fit(Z, y)
        return self

    def predict_raw(self, X) -> np.ndarray:
        """Unclamped ensemble output."""
        check_is_fitted(self, "booster_")
        Xf, shape = flatten_tiles(X, self.pixel_scale)
        if shape != self.tile_shape_:
            raise GeometryMismatch(f"trained on tiles {self.tile_shape_}, got {shape}")
        return self.booster_.predict(self.pca_.transform(Xf))

    def predict(self, X) -> np.ndarray:
        return np.clip(self.predict_raw(X), 0.0, 1.0)


def train_regressor(abnormal_tiles: DatasetManifest, targets: Mapping[str, float],
                    cfg: RegressionConfig = RegressionConfig(), tiles_root=None, X=None) -> TrainedModelBundle:
    """Fit the regressor on abnormal tiles only.

    ``targets`` maps tile id to the tile's segmented abnormal-pixel fraction.
    ``X``, when given, must follow the manifest's (tile-id sorted) order.
    """
    normal = [t.tile_id for t in abnormal_tiles.tiles if t.label is not Label.ABNORMAL]
    if normal:
        raise MixedLabels(f"{len(normal)} normal tiles in regression training set, e.g. {normal[:3]}")
    missing = [t.tile_id for t in abnormal_tiles.tiles if t.tile_id not in targets]
    if missing:
        raise MissingTarget(f"no target for {len(missing)} tiles, e.g. {missing[:3]}")
    if len(abnormal_tiles) == 0:
        raise ValueError("no tiles to train on")
    if X is None:
        X = TileStack(abnormal_tiles, tiles_root).to_array()
    y = np.array([targets[t.tile_id] for t in abnormal_tiles.tiles], dtype=np.float64)
    est = cfg.to_estimator().fit(X, y)
    pred = est.predict(X)
    diagnostics = {
        "n_train": int(len(y)),
        "n_components": est.n_features_out_,
        "pca_explained_variance": float(est.pca_.explained_variance_ratio_.sum()),
        "train_rmse": float(np.sqrt(mean_squared_error(y, pred))),
        "train_r2": float(r2_score(y, pred)) if np.ptp(y) > 0 else None,
    }
    arrays = {"pca_components": est.pca_.components_, "pca_mean": est.pca_.mean_,
              "pca_explained_variance": est.pca_.explained_variance_}
    return TrainedModelBundle(kind="regressor", estimator=est, config=asdict(cfg),
                              metrics=[diagnostics], arrays=arrays,
                              meta={"early_stopping": False, "clamp": [0.0, 1.0]})


def _estimator(bundle_or_estimator) -> PixelFractionRegressor:
    return getattr(bundle_or_estimator, "estimator", bundle_or_estimator)


def predict_window_fraction(bundle, tile_pixels: np.ndarray) -> float:
    return float(_estimator(bundle).predict(np.asarray(tile_pixels)[None])[0])


def aggregate_pixel_probability(fractions: Sequence[float], side: int, width: int, height: int) -> float:
    """Percent of image pixels abnormal, from per-window abnormal fractions."""
    if len(fractions) == 0:
        raise NoWindows("no windows to aggregate")
    total = float(np.sum(np.asarray(fractions, dtype=np.float64))) * side * side
    return 100.0 * total / (width * height)


def image_pixel_probability(bundle, img: AnnotatedImage, pixels: Optional[np.ndarray] = None,
                            side: int = DEFAULT_TILE_SIDE) -> float:
    """Run the regressor on every grid window of ``img`` and aggregate."""
    if side > min(img.width, img.height):
        raise NoWindows(f"{img.image_id} is smaller than one {side}px window")
    if pixels is None:
        pixels = load_image_pixels(img)
    windows = grid_windows(img, side)
    blocks = np.stack([extract_tile_pixels(img, rect, pixels) for rect, _ in windows])
    fractions = _estimator(bundle).predict(blocks)
    return aggregate_pixel_probability(fractions, side, img.width, img.height)

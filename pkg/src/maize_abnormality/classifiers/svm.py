"""PCA -> LDA -> RBF-SVM window classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.decomposition import PCA
from sklearn.discriminant_analysis import LinearDiscriminantAnalysis
from sklearn.svm import SVC
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from ..bundles import TrainedModelBundle
from ..exceptions import EmptyManifest, GeometryMismatch, SingularScatter
from ..tiling import DatasetManifest, TileStack
from ..validation import flatten_tiles


def _rows_identical(X: np.ndarray, idx: np.ndarray) -> bool:
    first = X[idx[0]]
    return all(np.array_equal(X[i], first) for i in idx[1:])


@dataclass(frozen=True)
class SvmConfig:
    kernel: str = "rbf"
    c: float = 1.0
    pca_variance: float = 0.99
    lda_components: int = 1
    pixel_scale: float = 1.0 / 255.0

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("C must be positive")
        if not 0 < self.pca_variance <= 1:
            raise ValueError("pca_variance must lie in (0, 1]")
        if self.lda_components != 1:
            raise ValueError("binary problem: lda_components must be 1")

    def to_estimator(self, random_state: Optional[int] = None) -> "PcaLdaSvmClassifier":
        return PcaLdaSvmClassifier(pca_variance=self.pca_variance, lda_components=self.lda_components,
                                   C=self.c, kernel=self.kernel, pixel_scale=self.pixel_scale,
                                   random_state=random_state)


class PcaLdaSvmClassifier(ClassifierMixin, BaseEstimator):
    """Flattened pixels -> PCA (variance target) -> LDA -> SVC.

    Parameters
    ----------
    pca_variance : float
        Fraction of variance the PCA projection must retain.
    lda_components : int
        LDA output dimension (at most ``n_classes - 1``).
    C, kernel : SVC parameters.
    pixel_scale : float
        Multiplier applied to raw pixel values before PCA.
    """

    def __init__(self, pca_variance=0.99, lda_components=1, C=1.0, kernel="rbf",
                 pixel_scale=1.0 / 255.0, random_state=None):
        self.pca_variance = pca_variance
        self.lda_components = lda_components
        self.C = C
        self.kernel = kernel
        self.pixel_scale = pixel_scale
        self.random_state = random_state

    def fit(self, X, y):
        Xf, self.tile_shape_ = flatten_tiles(X, self.pixel_scale)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(Xf):
            raise ValueError(f"{len(Xf)} tiles but {len(y)} labels")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        if self.lda_components > len(self.classes_) - 1:
            raise ValueError("lda_components must not exceed n_classes - 1")

        if all(_rows_identical(Xf, np.flatnonzero(y == c)) for c in self.classes_):
            raise SingularScatter("within-class scatter is zero: every class is a single repeated tile")

        self.pca_ = PCA(n_components=self.pca_variance, svd_solver="full", random_state=self.random_state)
        Z = self.pca_.fit_transform(Xf)
        self.lda_ = LinearDiscriminantAnalysis(n_components=self.lda_components)
        F = self.lda_.fit_transform(Z, y)
        self.svc_ = SVC(C=self.C, kernel=self.kernel, gamma="scale", random_state=self.random_state)
        self.svc_.fit(F, y)
        return self

    def transform(self, X) -> np.ndarray:
        """LDA features of ``X``."""
        check_is_fitted(self, "svc_")
        Xf, shape = flatten_tiles(X, self.pixel_scale)
        if shape != self.tile_shape_:
            raise GeometryMismatch(f"trained on tiles {self.tile_shape_}, got {shape}")
        return self.lda_.transform(self.pca_.transform(Xf))

    def decision_function(self, X) -> np.ndarray:
        return self.svc_.decision_function(self.transform(X))

    def predict(self, X) -> np.ndarray:
        return self.svc_.predict(self.transform(X))

    @property
    def n_components_(self) -> int:
        return int(self.pca_.n_components_)


def train_svm(train: DatasetManifest, cfg: SvmConfig = SvmConfig(), tiles_root=None, X=None,
              random_state: Optional[int] = None) -> TrainedModelBundle:
    """Fit the SVM pipeline on a manifest's tiles.

    Pixels come from ``X`` when given, else from the manifest's tile files
    under ``tiles_root``.
    """
    if len(train) == 0:
        raise EmptyManifest(f"{train.name} has no tiles")
    if X is None:
        X = TileStack(train, tiles_root).to_array()
    y = train.labels()
    est = cfg.to_estimator(random_state).fit(X, y)
    metrics = {
        "train_acc": float(est.score(X, y)),
        "n_pca_components": est.n_components_,
        "pca_explained_variance": float(est.pca_.explained_variance_ratio_.sum()),
    }
    arrays = {
        "pca_components": est.pca_.components_,
        "pca_mean": est.pca_.mean_,
        "pca_explained_variance": est.pca_.explained_variance_,
        "lda_scalings": est.lda_.scalings_,
        "lda_xbar": est.lda_.xbar_,
    }
    return TrainedModelBundle(kind="svm", estimator=est, config=asdict(cfg), metrics=[metrics],
                              arrays=arrays)

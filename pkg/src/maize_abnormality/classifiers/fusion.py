"""OR-fusion of window classifiers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_is_fitted

from ..exceptions import GeometryMismatch
from ..tiling import Label, TileRecord


def fuse_labels(label_cnn: Label, label_svm: Label) -> Label:
    """Abnormal if either classifier says abnormal."""
    if Label(label_cnn) is Label.ABNORMAL or Label(label_svm) is Label.ABNORMAL:
        return Label.ABNORMAL
    return Label.NORMAL


@dataclass(frozen=True)
class WindowPrediction:
    tile_id: str
    label_cnn: Label
    label_svm: Label
    label_fused: Label
    score_cnn: float

    def __post_init__(self):
        for name in ("label_cnn", "label_svm", "label_fused"):
            object.__setattr__(self, name, Label(getattr(self, name)))
        if self.label_fused is not fuse_labels(self.label_cnn, self.label_svm):
            raise ValueError(f"{self.tile_id}: fused label violates the OR rule")


def _to_label(value) -> Label:
    return Label.ABNORMAL if int(value) == 1 else Label.NORMAL


class OrFusionClassifier(ClassifierMixin, BaseEstimator):
    """Predicts abnormal (1) when any member estimator predicts 1.

    With ``prefit=True`` the members are used as given; otherwise clones
    are fitted on the same data.
    """

    def __init__(self, estimators=(), prefit=False):
        self.estimators = estimators
        self.prefit = prefit

    def fit(self, X, y, **fit_params):
        if self.prefit:
            self.estimators_ = list(self.estimators)
        else:
            self.estimators_ = [clone(est).fit(X, y, **fit_params) for est in self.estimators]
        self.classes_ = np.array([0, 1])
        return self

    def member_predictions(self, X) -> np.ndarray:
        check_is_fitted(self, "estimators_")
        return np.stack([np.asarray(est.predict(X)).astype(int) for est in self.estimators_])

    def predict(self, X) -> np.ndarray:
        return self.member_predictions(X).max(axis=0)


def _check_geometry(estimator, tiles: Sequence[TileRecord], pixels) -> None:
    expected = getattr(estimator, "tile_shape_", None)
    if expected is None:
        return
    side = expected[0]
    bad = [t.tile_id for t in tiles if t.rect.side != side]
    if bad:
        raise GeometryMismatch(f"{type(estimator).__name__} was trained on {side}px tiles; got {bad[:3]}")
    shape = tuple(getattr(pixels, "shape", ())[1:])
    if shape and shape != tuple(expected):
        raise GeometryMismatch(f"{type(estimator).__name__} expects tiles {expected}, got {shape}")


def predict_windows(cnn, svm, tiles: Sequence[TileRecord], pixels) -> list[WindowPrediction]:
    """Per-tile CNN, SVM and fused labels.

    ``pixels`` is an array-like of tile blocks aligned with ``tiles``.
    """
    if len(tiles) != len(pixels):
        raise ValueError(f"{len(tiles)} tiles but {len(pixels)} pixel blocks")
    if not tiles:
        return []
    for est in (cnn, svm):
        _check_geometry(est, tiles, pixels)
    scores = np.asarray(cnn.predict_proba(pixels))[:, 1]
    cnn_labels = np.asarray(cnn.predict(pixels)).astype(int)
    svm_labels = np.asarray(svm.predict(pixels)).astype(int)
    out = []
    for tile, c, s, score in zip(tiles, cnn_labels, svm_labels, scores):
        lc, ls = _to_label(c), _to_label(s)
        out.append(WindowPrediction(tile.tile_id, lc, ls, fuse_labels(lc, ls), float(score)))
    return out

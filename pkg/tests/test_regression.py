import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import r2_score

from maize_abnormality.bundles import TrainedModelBundle
from maize_abnormality.exceptions import GeometryMismatch, MissingTarget, MixedLabels, NoWindows
from maize_abnormality.geometry import BoundingBox, WindowRect
from maize_abnormality.regression import (PixelFractionRegressor, RegressionConfig, aggregate_pixel_probability,
                                          image_pixel_probability, predict_window_fraction, train_regressor)
from maize_abnormality.segmentation import pixel_probability_ground_truth, window_pixel_target
from maize_abnormality.synthetic import YELLOW, green_background, make_fraction_corpus, paint
from maize_abnormality.tiling import DatasetManifest, Label, OriginKind, TileRecord, grid_windows


def test_config_defaults_and_aliases():
    cfg = RegressionConfig(loss="squared")
    assert cfg.loss == "squared_error"
    est = cfg.to_estimator()
    assert (est.max_iter, est.max_depth, est.l2_regularization, est.pca_variance) == (750, 7, 3.0, 0.99)
    with pytest.raises(ValueError):
        RegressionConfig(iterations=0)


def test_held_out_r2_on_synthetic_fractions():
    X, f = make_fraction_corpus(200, side=32, seed=0)
    Xt, ft = make_fraction_corpus(100, side=32, seed=1)
    est = RegressionConfig(iterations=200).to_estimator().fit(X, f)
    assert r2_score(ft, est.predict(Xt)) >= 0.9


class _FixedBooster:
    def __init__(self, values):
        self.values = np.asarray(values, float)

    def predict(self, Z):
        return self.values[: len(Z)]


def test_output_clamped():
    X, f = make_fraction_corpus(10, side=16, seed=0)
    est = PixelFractionRegressor(max_iter=5).fit(X, f)
    est.booster_ = _FixedBooster([-0.02, 1.3, 0.4])
    assert list(est.predict(X[:3])) == [0.0, 1.0, 0.4]
    assert list(est.predict_raw(X[:3])) == [-0.02, 1.3, 0.4]


def test_geometry_mismatch():
    X, f = make_fraction_corpus(10, side=16, seed=0)
    est = PixelFractionRegressor(max_iter=5).fit(X, f)
    with pytest.raises(GeometryMismatch):
        est.predict(np.zeros((1, 8, 8, 3), np.uint8))


def _manifest(labels, side=16):
    tiles = [TileRecord(f"t{i:03d}", "img", WindowRect(0, 0, side), lab, OriginKind.RANDOM_CROP)
             for i, lab in enumerate(labels)]
    return DatasetManifest("reg", tiles, tile_side=side)


def test_train_regressor_contract(tmp_path):
    X, f = make_fraction_corpus(80, side=16, seed=0)
    m = _manifest([Label.ABNORMAL] * 80)
    bundle = train_regressor(m, {f"t{i:03d}": v for i, v in enumerate(f)}, RegressionConfig(iterations=30), X=X)
    d = bundle.metrics[0]
    assert d["n_train"] == 80 and d["train_r2"] > 0.9 and d["n_components"] >= 1
    bundle.save(tmp_path / "reg")
    back = TrainedModelBundle.load(tmp_path / "reg", kind="regressor")
    assert np.allclose(back.estimator.predict(X), bundle.estimator.predict(X))
    assert predict_window_fraction(back, X[0]) == pytest.approx(bundle.estimator.predict(X[:1])[0])


def test_train_regressor_rejects_normal_tiles():
    X, f = make_fraction_corpus(3, side=16)
    with pytest.raises(MixedLabels):
        train_regressor(_manifest([Label.ABNORMAL, Label.NORMAL, Label.ABNORMAL]),
                        {f"t{i:03d}": 0.1 for i in range(3)}, X=X)


def test_train_regressor_requires_targets():
    X, f = make_fraction_corpus(3, side=16)
    with pytest.raises(MissingTarget):
        train_regressor(_manifest([Label.ABNORMAL] * 3), {"t000": 0.1}, X=X)


def test_aggregate_examples():
    assert aggregate_pixel_probability([0.0] * 96, 250, 3000, 2000) == 0.0
    assert aggregate_pixel_probability([1.0] * 96, 250, 3000, 2000) == 100.0
    one = aggregate_pixel_probability([0.25] + [0.0] * 95, 250, 3000, 2000)
    assert one == pytest.approx(100 * 0.25 * 62500 / 6_000_000, rel=1e-12)
    with pytest.raises(NoWindows):
        aggregate_pixel_probability([], 250, 3000, 2000)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=96))
def test_aggregate_bounded_and_linear(fracs):
    p = aggregate_pixel_probability(fracs, 250, 3000, 2000)
    assert 0 <= p <= 100
    assert aggregate_pixel_probability([v / 2 for v in fracs], 250, 3000, 2000) == pytest.approx(p / 2, abs=1e-12)


class _TruthOracle:
    """Stands in for a fitted regressor and returns segmentation targets."""

    def __init__(self, img, pixels):
        self.lookup = {extract.tobytes(): window_pixel_target(img, rect, pixels=pixels)
                       for rect, _ in grid_windows(img, 250)
                       for extract in [pixels[rect.y0:rect.y1, rect.x0:rect.x1]]}

    def predict(self, blocks):
        return np.array([self.lookup[b.tobytes()] for b in blocks])


def test_truth_targets_reproduce_segmentation(image_factory):
    rng = np.random.default_rng(0)
    px = green_background(500, 750, rng)
    boxes = [BoundingBox(10, 20, 100, 80), BoundingBox(240, 200, 120, 90), BoundingBox(600, 400, 100, 100)]
    for b in boxes:
        paint(px, BoundingBox(b.x + 5, b.y + 5, b.w - 10, b.h - 10), YELLOW)
    img = image_factory(750, 500, boxes, pixels=px)
    got = image_pixel_probability(_TruthOracle(img, px), img, pixels=px)
    assert got == pytest.approx(pixel_probability_ground_truth(img, pixels=px), abs=1e-9)


def test_image_too_small(virtual_image):
    with pytest.raises(NoWindows):
        image_pixel_probability(_FixedBooster([]), virtual_image(200, 200))

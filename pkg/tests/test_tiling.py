import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import rasterize
from maize_abnormality.exceptions import BoxTooLargeForTile, ExhaustedSampling, RectOutOfBounds
from maize_abnormality.geometry import AnnotatedImage, BoundingBox, Split, WindowRect, contains
from maize_abnormality.tiling import (DatasetManifest, Label, LabelRule, OriginKind, TileRecord, TileStack,
                                      abnormal_origin_range, build_grid_manifest, extract_tile_pixels,
                                      grid_tile_id, grid_windows, materialize_tiles, read_dataset_manifest,
                                      sample_random_crops, split_train_validation, verify_labels,
                                      write_dataset_manifest)
from maize_abnormality.tiling import _stratified_counts


def _brute_force_origins(box, width, height, side):
    return {(x0, y0) for x0 in range(width - side + 1) for y0 in range(height - side + 1)
            if contains(WindowRect(x0, y0, side), box)}


@pytest.mark.parametrize("box, width, height", [
    (BoundingBox(0, 0, 50, 50), 600, 400),
    (BoundingBox(300, 200, 40, 30), 600, 400),
    (BoundingBox(550, 350, 50, 50), 600, 400),
    (BoundingBox(0, 0, 250, 250), 600, 400),
])
def test_origin_range_matches_enumeration(box, width, height):
    xs, ys = abnormal_origin_range(box, width, height, 250)
    assert {(x, y) for x in xs for y in ys} == _brute_force_origins(box, width, height, 250)


def test_box_at_corner_pins_origin():
    xs, ys = abnormal_origin_range(BoundingBox(0, 0, 50, 50), 1000, 1000, 250)
    assert list(xs) == [0] and list(ys) == [0]


@given(bx=st.integers(0, 30), by=st.integers(0, 30), bw=st.integers(1, 12), bh=st.integers(1, 12),
       side=st.integers(12, 20))
def test_origin_range_property(bx, by, bw, bh, side):
    width = height = 45
    bw, bh = min(bw, width - bx), min(bh, height - by)
    box = BoundingBox(bx, by, bw, bh)
    xs, ys = abnormal_origin_range(box, width, height, side)
    assert {(x, y) for x in xs for y in ys} == _brute_force_origins(box, width, height, side)


def test_random_crop_labels_follow_rule(virtual_image):
    imgs = [virtual_image(1200, 900, [(100, 100, 60, 60), (700, 500, 120, 80), (1000, 50, 30, 200)], "a"),
            virtual_image(1200, 900, [(400, 400, 250, 250)], "b")]
    m = sample_random_crops(imgs, 200, 200, seed=5)
    assert m.class_counts == {"normal": 200, "abnormal": 200}
    assert m.rule is LabelRule.FULL_CONTAINMENT and m.split is Split.A_TRAIN
    assert verify_labels(m, imgs) == []
    by_id = {i.image_id: i for i in imgs}
    for t in m.tiles:
        img = by_id[t.source_image_id]
        win = rasterize(BoundingBox(t.rect.x0, t.rect.y0, 250, 250), img.width, img.height)
        masks = [rasterize(b, img.width, img.height) for b in img.boxes]
        if t.label is Label.ABNORMAL:
            assert any(np.all(win[mk]) for mk in masks)
        else:
            assert not any(np.any(win & mk) for mk in masks)


def test_random_crops_deterministic_and_seed_sensitive(virtual_image):
    imgs = [virtual_image(800, 800, [(100, 100, 50, 50)], "a")]
    a = sample_random_crops(imgs, 30, 30, seed=1)
    b = sample_random_crops(imgs, 30, 30, seed=1)
    c = sample_random_crops(imgs, 30, 30, seed=2)
    assert a == b
    assert [t.tile_id for t in a.tiles] != [t.tile_id for t in c.tiles]
    assert a.class_counts == c.class_counts


def test_single_normal_tile_on_boxless_image(virtual_image):
    m = sample_random_crops([virtual_image(300, 300)], 0, 1, seed=0)
    assert len(m) == 1 and m.tiles[0].label is Label.NORMAL


def test_exhausted_when_no_normal_window_exists(virtual_image):
    img = virtual_image(300, 300, [(0, 0, 300, 300)])
    with pytest.raises(ExhaustedSampling):
        sample_random_crops([img], 0, 1, seed=0, max_attempts=50)


def test_exhausted_when_no_box_fits(virtual_image):
    img = virtual_image(600, 600, [(0, 0, 300, 300)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoxTooLargeForTile)
        with pytest.raises(ExhaustedSampling):
            sample_random_crops([img], 1, 0, seed=0)


def test_oversize_box_warns(virtual_image):
    img = virtual_image(800, 800, [(0, 0, 300, 10), (500, 500, 20, 20)])
    with pytest.warns(BoxTooLargeForTile):
        m = sample_random_crops([img], 5, 0, seed=0)
    assert all(t.rect.x0 >= 270 for t in m.tiles)


def test_mixed_splits_rejected(virtual_image):
    with pytest.raises(ValueError):
        sample_random_crops([virtual_image(300, 300, image_id="a"),
                             virtual_image(300, 300, image_id="b", split=Split.B_TEST)], 0, 2, seed=0)


# --- stratified split ---------------------------------------------------------

def _manifest(n_abnormal, n_normal):
    tiles = [TileRecord(f"{lab[0]}{i:05d}", "img", WindowRect(0, 0, 250), lab, OriginKind.RANDOM_CROP)
             for lab, n in ((Label.ABNORMAL, n_abnormal), (Label.NORMAL, n_normal)) for i in range(n)]
    return DatasetManifest("m", tiles, seed=0)


def test_split_full_scale_counts():
    train, val = split_train_validation(_manifest(4966, 4966), 0.10, seed=0)
    assert len(train) == 8938 and len(val) == 994
    assert val.class_counts == {"normal": 497, "abnormal": 497}


def test_split_one_per_class_half():
    train, val = split_train_validation(_manifest(1, 1), 0.5, seed=0)
    assert len(train) == 1 and len(val) == 1


def test_stratified_rounds_to_nearest():
    assert _stratified_counts({"abnormal": 17, "normal": 14}, 0.1) == {"abnormal": 2, "normal": 1}


@given(na=st.integers(1, 300), nn=st.integers(1, 300), frac=st.floats(0.01, 0.99), seed=st.integers(0, 99))
def test_split_is_partition(na, nn, frac, seed):
    m = _manifest(na, nn)
    train, val = split_train_validation(m, frac, seed)
    ids_t, ids_v = {t.tile_id for t in train.tiles}, {t.tile_id for t in val.tiles}
    assert not ids_t & ids_v
    assert ids_t | ids_v == {t.tile_id for t in m.tiles}
    for label, n in (("abnormal", na), ("normal", nn)):
        assert abs(val.class_counts[label] - n * frac) <= 0.5 + 1e-9
    assert split_train_validation(m, frac, seed) == (train, val)


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split_train_validation(_manifest(2, 2), 1.0, 0)


# --- grid windows -------------------------------------------------------------

def test_grid_counts_quarter(virtual_image):
    windows = grid_windows(virtual_image(3000, 2000), 250)
    assert len(windows) == 96
    assert all(label is Label.NORMAL for _, label in windows)
    rows = {r.grid_row for r, _ in windows}
    cols = {r.grid_col for r, _ in windows}
    assert rows == set(range(8)) and cols == set(range(12))


def test_grid_drops_remainder(virtual_image):
    windows = grid_windows(virtual_image(620, 510), 250)
    assert len(windows) == 4
    assert max(r.x1 for r, _ in windows) == 500 and max(r.y1 for r, _ in windows) == 500


def test_grid_any_intersection(virtual_image):
    img = virtual_image(750, 500, [(240, 10, 20, 20)])
    labels = {(r.grid_row, r.grid_col): lab for r, lab in grid_windows(img, 250)}
    assert labels[(0, 0)] is Label.ABNORMAL and labels[(0, 1)] is Label.ABNORMAL
    assert sum(lab is Label.ABNORMAL for lab in labels.values()) == 2


def test_grid_manifest_ids(virtual_image):
    img = virtual_image(500, 500, image_id="P_q0", split=Split.B_TEST)
    m = build_grid_manifest([img])
    assert [t.tile_id for t in m.tiles] == ["P_q0_r000_c000", "P_q0_r000_c001", "P_q0_r001_c000",
                                            "P_q0_r001_c001"]
    assert m.rule is LabelRule.ANY_INTERSECTION
    assert grid_tile_id("x", WindowRect(0, 0, 250, 3, 11)) == "x_r003_c011"


# --- pixels -----------------------------------------------------------------

def test_extract_identity_and_roundtrip(image_factory):
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, (300, 400, 3), dtype=np.uint8)
    img = image_factory(400, 300, pixels=px)
    block = extract_tile_pixels(img, WindowRect(100, 30, 250))
    assert block.shape == (250, 250, 3)
    rebuilt = np.zeros_like(px)
    rebuilt[30:280, 100:350] = block
    assert np.array_equal(rebuilt[30:280, 100:350], px[30:280, 100:350])
    small = image_factory(250, 250, pixels=px[:250, :250].copy(), image_id="s")
    assert np.array_equal(extract_tile_pixels(small, WindowRect(0, 0, 250)), px[:250, :250])


def test_extract_constant_block(image_factory):
    img = image_factory(300, 300)
    block = extract_tile_pixels(img, WindowRect(0, 0, 250))
    assert np.all(block == block[0, 0])


def test_extract_out_of_bounds(virtual_image):
    with pytest.raises(RectOutOfBounds):
        extract_tile_pixels(virtual_image(300, 300), WindowRect(100, 100, 250))


def test_extract_from_quarter_uses_offset(image_factory):
    from maize_abnormality.geometry import quarter_image
    px = np.random.default_rng(1).integers(0, 256, (600, 1000, 3), dtype=np.uint8)
    q3 = quarter_image(image_factory(1000, 600, pixels=px))[3]
    assert np.array_equal(extract_tile_pixels(q3, WindowRect(250, 0, 250)), px[300:550, 750:1000])


def test_manifest_persistence_and_materialize(tmp_path, image_factory):
    px = np.random.default_rng(2).integers(0, 256, (500, 500, 3), dtype=np.uint8)
    img = image_factory(500, 500, [BoundingBox(10, 10, 30, 30)], pixels=px)
    m = sample_random_crops([img], 3, 3, seed=0)
    m = materialize_tiles(m, [img], tmp_path / "ds", "tiles/x")
    write_dataset_manifest(m, tmp_path / "ds" / "x")
    first = (tmp_path / "ds" / "x" / "tiles.jsonl").read_bytes()
    back = read_dataset_manifest(tmp_path / "ds" / "x")
    assert back == m
    write_dataset_manifest(back, tmp_path / "ds" / "x")
    assert (tmp_path / "ds" / "x" / "tiles.jsonl").read_bytes() == first
    stack = TileStack(back, tmp_path / "ds")
    assert stack.shape == (6, 250, 250, 3)
    for t, block in zip(back.tiles, stack.to_array()):
        r = t.rect
        assert np.array_equal(block, px[r.y0:r.y1, r.x0:r.x1])


def test_manifest_rejects_inconsistent_header(tmp_path, virtual_image):
    m = sample_random_crops([virtual_image(300, 300)], 0, 2, seed=0)
    write_dataset_manifest(m, tmp_path)
    lines = (tmp_path / "tiles.jsonl").read_text().splitlines()
    (tmp_path / "tiles.jsonl").write_text(lines[0] + "\n")
    with pytest.raises(ValueError):
        read_dataset_manifest(tmp_path)


def test_tile_side_mismatch_rejected():
    t = TileRecord("t", "i", WindowRect(0, 0, 100), Label.NORMAL, OriginKind.RANDOM_CROP)
    with pytest.raises(ValueError):
        DatasetManifest("m", [t], tile_side=250)

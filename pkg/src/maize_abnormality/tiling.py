"""Tile datasets: random crops, stratified validation split, grid windows.

Two labeling rules are used:

* ``full_containment`` (random crops) -- a crop is abnormal when it fully
  contains at least one box and normal when it touches no box at all;
  crops that only partially overlap a box are never emitted.
* ``any_intersection`` (grid windows) -- a window is abnormal when it
  overlaps any box with positive area.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections import Counter, defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .exceptions import BoxTooLargeForTile, ExhaustedSampling, RectOutOfBounds
from .geometry import DEFAULT_TILE_SIDE, AnnotatedImage, Split, WindowRect, contains, intersects
from .imageio import load_image_pixels, load_rgb, save_rgb

logger = logging.getLogger(__name__)

MAX_ATTEMPTS_PER_NORMAL_TILE = 1000


class Label(str, Enum):
    NORMAL = "normal"
    ABNORMAL = "abnormal"

    @property
    def as_int(self) -> int:
        return int(self is Label.ABNORMAL)


class OriginKind(str, Enum):
    RANDOM_CROP = "random_crop"
    GRID_WINDOW = "grid_window"


class LabelRule(str, Enum):
    FULL_CONTAINMENT = "full_containment"
    ANY_INTERSECTION = "any_intersection"


@dataclass(frozen=True)
class TileRecord:
    tile_id: str
    source_image_id: str
    rect: WindowRect
    label: Label
    origin_kind: OriginKind
    pixel_data_path: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "source_image_id": self.source_image_id,
            "rect": self.rect.to_dict(),
            "label": self.label.value,
            "origin_kind": self.origin_kind.value,
            "pixel_data_path": self.pixel_data_path,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TileRecord":
        return cls(
            tile_id=d["tile_id"],
            source_image_id=d["source_image_id"],
            rect=WindowRect.from_dict(d["rect"]),
            label=Label(d["label"]),
            origin_kind=OriginKind(d["origin_kind"]),
            pixel_data_path=d.get("pixel_data_path"),
        )


@dataclass
class DatasetManifest:
    name: str
    tiles: list = field(default_factory=list)
    seed: Optional[int] = None
    rule: LabelRule = LabelRule.FULL_CONTAINMENT
    split: Optional[Split] = None
    tile_side: int = DEFAULT_TILE_SIDE

    def __post_init__(self):
        self.tiles = sorted(self.tiles, key=lambda t: t.tile_id)
        self.rule = LabelRule(self.rule)
        if self.split is not None:
            self.split = Split.parse(self.split)
        bad = [t.tile_id for t in self.tiles if t.rect.side != self.tile_side]
        if bad:
            raise ValueError(f"{self.name}: tiles with side != {self.tile_side}: {bad[:5]}")

    def __len__(self) -> int:
        return len(self.tiles)

    @property
    def class_counts(self) -> dict[str, int]:
        counts = Counter(t.label.value for t in self.tiles)
        return {label.value: counts.get(label.value, 0) for label in Label}

    def labels(self) -> np.ndarray:
        """Integer labels (1 = abnormal) in tile order."""
        return np.array([t.label.as_int for t in self.tiles], dtype=np.int64)

    def subset(self, name: str, tiles: Iterable[TileRecord]) -> "DatasetManifest":
        return replace(self, name=name, tiles=list(tiles))

    def header(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "rule": self.rule.value,
            "split": self.split.value if self.split else None,
            "tile_side": self.tile_side,
            "n_tiles": len(self.tiles),
            "class_counts": self.class_counts,
        }


# ---------------------------------------------------------------------------
# random crops
# ---------------------------------------------------------------------------

def _common_split(images: Sequence[AnnotatedImage]) -> Optional[Split]:
    splits = {img.split for img in images}
    if len(splits) > 1:
        raise ValueError(f"images from several splits mixed in one dataset: {sorted(s.value for s in splits)}")
    return splits.pop() if splits else None


def abnormal_origin_range(box, width: int, height: int, side: int) -> tuple[range, range]:
    """All window origins ``(x0, y0)`` whose window contains ``box`` and fits in the image."""
    xs = range(max(0, box.x1 - side), min(box.x, width - side) + 1)
    ys = range(max(0, box.y1 - side), min(box.y, height - side) + 1)
    return xs, ys


def sample_random_crops(
    images: Sequence[AnnotatedImage],
    n_abnormal: int,
    n_normal: int,
    seed: int,
    side: int = DEFAULT_TILE_SIDE,
    name: str = "random_crops",
    max_attempts: int = MAX_ATTEMPTS_PER_NORMAL_TILE,
) -> DatasetManifest:
    """Sample labelled random crops from ``images``.

    Abnormal crops pick a box uniformly over all boxes that fit in a tile,
    then an origin uniformly among the windows fully containing it. Normal
    crops are drawn by rejection: uniform image, uniform origin, accepted
    when no box is touched. Duplicate crops are allowed.
    """
    if not images:
        raise ValueError("no images to sample from")
    if n_abnormal < 0 or n_normal < 0:
        raise ValueError("tile counts must be non-negative")
    usable = [img for img in images if img.width >= side and img.height >= side]
    if len(usable) < len(images):
        raise ValueError(f"tile side {side} does not fit inside every image")
    split = _common_split(images)
    rng = np.random.default_rng(seed)

    candidates = []
    for img in images:
        for b in img.boxes:
            if b.w > side or b.h > side:
                if not n_abnormal:
                    continue
                warnings.warn(
                    f"{img.image_id}: box {b} larger than tile side {side}; "
                    "skipped for abnormal crops", BoxTooLargeForTile, stacklevel=2)
                continue
            candidates.append((img, b))

    tiles = []
    if n_abnormal and not candidates:
        raise ExhaustedSampling("no bounding box fits inside a tile; cannot sample abnormal crops")
    for i in range(n_abnormal):
        img, box = candidates[rng.integers(len(candidates))]
        xs, ys = abnormal_origin_range(box, img.width, img.height, side)
        x0 = xs[rng.integers(len(xs))]
        y0 = ys[rng.integers(len(ys))]
        tiles.append(TileRecord(
            tile_id=f"a{i:05d}_{img.image_id}_{x0}_{y0}",
            source_image_id=img.image_id,
            rect=WindowRect(int(x0), int(y0), side),
            label=Label.ABNORMAL,
            origin_kind=OriginKind.RANDOM_CROP,
        ))

    for i in range(n_normal):
        for _ in range(max_attempts):
            img = images[rng.integers(len(images))]
            x0 = int(rng.integers(img.width - side + 1))
            y0 = int(rng.integers(img.height - side + 1))
            rect = WindowRect(x0, y0, side)
            if not any(intersects(rect, b) for b in img.boxes):
                break
        else:
            raise ExhaustedSampling(
                f"no box-free window found after {max_attempts} attempts (normal tile {i})")
        tiles.append(TileRecord(
            tile_id=f"n{i:05d}_{img.image_id}_{x0}_{y0}",
            source_image_id=img.image_id,
            rect=rect,
            label=Label.NORMAL,
            origin_kind=OriginKind.RANDOM_CROP,
        ))

    return DatasetManifest(name=name, tiles=tiles, seed=seed, rule=LabelRule.FULL_CONTAINMENT,
                           split=split, tile_side=side)


def _stratified_counts(counts: Mapping[str, int], fraction: float) -> dict[str, int]:
    """Validation size per class: nearest integer to ``count * fraction``.

    Exact .5 ties are resolved alternately up and down across classes (in
    label order) so that the total stays as close as possible to the
    requested fraction.
    """
    out, round_up = {}, True
    for label in sorted(counts):
        exact = counts[label] * fraction
        lower = math.floor(exact)
        if exact - lower == 0.5:
            out[label] = lower + 1 if round_up else lower
            round_up = not round_up
        else:
            out[label] = int(math.floor(exact + 0.5))
    return out


def split_train_validation(
    manifest: DatasetManifest, fraction: float, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Stratified, deterministic train/validation partition."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    by_label = defaultdict(list)
    for t in manifest.tiles:
        by_label[t.label.value].append(t)
    n_val = _stratified_counts({k: len(v) for k, v in by_label.items()}, fraction)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for label in sorted(by_label):
        group = by_label[label]
        order = rng.permutation(len(group))
        chosen = set(order[: n_val[label]].tolist())
        for idx, tile in enumerate(group):
            (val if idx in chosen else train).append(tile)
    return (manifest.subset(f"{manifest.name}_train", train),
            manifest.subset(f"{manifest.name}_val", val))


# ---------------------------------------------------------------------------
# grid windows
# ---------------------------------------------------------------------------

def grid_windows(img: AnnotatedImage, side: int = DEFAULT_TILE_SIDE) -> list[tuple[WindowRect, Label]]:
    """Non-overlapping row-major grid; remainder strips are dropped."""
    if side > min(img.width, img.height):
        raise ValueError(f"{img.image_id}: tile side {side} exceeds {img.width}x{img.height}")
    out = []
    for r in range(img.height // side):
        for c in range(img.width // side):
            rect = WindowRect(c * side, r * side, side, grid_row=r, grid_col=c)
            abnormal = any(intersects(rect, b) for b in img.boxes)
            out.append((rect, Label.ABNORMAL if abnormal else Label.NORMAL))
    return out


def grid_tile_id(image_id: str, rect: WindowRect) -> str:
    return f"{image_id}_r{rect.grid_row:03d}_c{rect.grid_col:03d}"


def build_grid_manifest(images: Sequence[AnnotatedImage], side: int = DEFAULT_TILE_SIDE,
                        name: str = "grid_windows") -> DatasetManifest:
    tiles = [
        TileRecord(grid_tile_id(img.image_id, rect), img.image_id, rect, label, OriginKind.GRID_WINDOW)
        for img in images
        for rect, label in grid_windows(img, side)
    ]
    return DatasetManifest(name=name, tiles=tiles, seed=None, rule=LabelRule.ANY_INTERSECTION,
                           split=_common_split(images), tile_side=side)


def expected_label(tile: TileRecord, img: AnnotatedImage) -> Optional[Label]:
    """Recompute a tile's label from geometry; None if the rule rejects the tile."""
    if tile.origin_kind is OriginKind.GRID_WINDOW:
        hit = any(intersects(tile.rect, b) for b in img.boxes)
        return Label.ABNORMAL if hit else Label.NORMAL
    if any(contains(tile.rect, b) for b in img.boxes):
        return Label.ABNORMAL
    if not any(intersects(tile.rect, b) for b in img.boxes):
        return Label.NORMAL
    return None


def verify_labels(manifest: DatasetManifest, images: Iterable[AnnotatedImage]) -> list[str]:
    """Tile ids whose stored label disagrees with the geometry or split."""
    by_id = {img.image_id: img for img in images}
    bad = []
    for t in manifest.tiles:
        img = by_id.get(t.source_image_id)
        if img is None or (manifest.split is not None and img.split is not manifest.split):
            bad.append(t.tile_id)
        elif expected_label(t, img) is not t.label:
            bad.append(t.tile_id)
    return bad


# ---------------------------------------------------------------------------
# pixels
# ---------------------------------------------------------------------------

def extract_tile_pixels(img: AnnotatedImage, rect: WindowRect, pixels: Optional[np.ndarray] = None) -> np.ndarray:
    """Exact ``side x side x 3`` crop (no resampling)."""
    if not rect.fits_inside(img.width, img.height):
        raise RectOutOfBounds(f"{rect} lies outside {img.image_id} ({img.width}x{img.height})")
    if pixels is None:
        pixels = load_image_pixels(img)
    return pixels[rect.y0:rect.y1, rect.x0:rect.x1].copy()


def materialize_tiles(manifest: DatasetManifest, images: Iterable[AnnotatedImage],
                      root, subdir: str = "tiles") -> DatasetManifest:
    """Write every tile as a PNG under ``root/subdir`` and record its path.

    Recorded paths are relative to ``root``. Each source image is decoded once.
    """
    root = Path(root)
    by_id = {img.image_id: img for img in images}
    by_source = defaultdict(list)
    for t in manifest.tiles:
        by_source[t.source_image_id].append(t)
    out = []
    for source in sorted(by_source):
        img = by_id[source]
        pixels = load_image_pixels(img)
        for t in by_source[source]:
            rel = f"{subdir}/{t.tile_id}.png"
            save_rgb(extract_tile_pixels(img, t.rect, pixels), root / rel)
            out.append(replace(t, pixel_data_path=rel))
    return manifest.subset(manifest.name, out)


class TileStack(Sequence):
    """Lazily loaded tile pixels of a manifest, indexable like an array."""

    def __init__(self, manifest: DatasetManifest, root):
        missing = [t.tile_id for t in manifest.tiles if t.pixel_data_path is None]
        if missing:
            raise ValueError(f"{manifest.name}: tiles without pixel files, e.g. {missing[:3]}")
        self.paths = [Path(root) / t.pixel_data_path for t in manifest.tiles]
        self.side = manifest.tile_side

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return np.stack([self[i] for i in range(*idx.indices(len(self)))])
        return load_rgb(self.paths[idx])

    @property
    def shape(self) -> tuple:
        return (len(self), self.side, self.side, 3)

    def to_array(self) -> np.ndarray:
        return self[:]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_dataset_manifest(manifest: DatasetManifest, dataset_dir) -> tuple[Path, Path]:
    """Write ``header.json`` and ``tiles.jsonl`` (sorted by tile id)."""
    dataset_dir = Path(dataset_dir)
    dataset_dir.mkdir(parents=True, exist_ok=True)
    header_path, tiles_path = dataset_dir / "header.json", dataset_dir / "tiles.jsonl"
    header_path.write_text(json.dumps(manifest.header(), indent=2, sort_keys=True) + "\n")
    with tiles_path.open("w") as fh:
        for t in manifest.tiles:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")
    return header_path, tiles_path


def read_dataset_manifest(dataset_dir) -> DatasetManifest:
    dataset_dir = Path(dataset_dir)
    header = json.loads((dataset_dir / "header.json").read_text())
    with (dataset_dir / "tiles.jsonl").open() as fh:
        tiles = [TileRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
    manifest = DatasetManifest(name=header["name"], tiles=tiles, seed=header.get("seed"),
                               rule=header["rule"], split=header.get("split"),
                               tile_side=header["tile_side"])
    if manifest.class_counts != header["class_counts"]:
        raise ValueError(f"{dataset_dir}: class_counts in header disagree with tiles")
    return manifest

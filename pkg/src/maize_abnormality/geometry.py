"""Annotated field images, rectangle predicates and annotation ingestion.

Coordinates are integer pixels with the origin at the top-left corner of
the image; a rectangle ``(x, y, w, h)`` covers the half-open pixel ranges
``[x, x + w) x [y, y + h)``.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

from PIL import Image

from .exceptions import (
    BoxOutOfBounds,
    MalformedExport,
    MissingImageFile,
    OddDimension,
    SplitAssignmentError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_TILE_SIDE = 250


class GrowthStage(str, Enum):
    V8 = "V8"
    V12 = "V12"


class Split(str, Enum):
    A_TRAIN = "A_train"
    B_TEST = "B_test"

    @classmethod
    def parse(cls, value) -> "Split":
        if isinstance(value, cls):
            return value
        aliases = {"a": cls.A_TRAIN, "a_train": cls.A_TRAIN, "train": cls.A_TRAIN,
                   "b": cls.B_TEST, "b_test": cls.B_TEST, "test": cls.B_TEST}
        try:
            return aliases[str(value).strip().lower()]
        except KeyError:
            raise SplitAssignmentError(f"unknown split {value!r}") from None


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got {self}")

    @property
    def x1(self) -> int:
        return self.x + self.w

    @property
    def y1(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def fits_inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x1 <= width and self.y1 <= height

    def clip(self, x0: int, y0: int, x1: int, y1: int) -> Optional["BoundingBox"]:
        """Intersection with ``[x0, x1) x [y0, y1)``, or None when empty."""
        left, top = max(self.x, x0), max(self.y, y0)
        right, bottom = min(self.x1, x1), min(self.y1, y1)
        if right <= left or bottom <= top:
            return None
        return BoundingBox(left, top, right - left, bottom - top)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass(frozen=True)
class WindowRect:
    """A square window. Grid indices are None for randomly placed crops."""

    x0: int
    y0: int
    side: int = DEFAULT_TILE_SIDE
    grid_row: Optional[int] = None
    grid_col: Optional[int] = None

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError(f"window side must be positive, got {self.side}")

    @property
    def x1(self) -> int:
        return self.x0 + self.side

    @property
    def y1(self) -> int:
        return self.y0 + self.side

    def fits_inside(self, width: int, height: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "side": self.side,
                "grid_row": self.grid_row, "grid_col": self.grid_col}

    @classmethod
    def from_dict(cls, d: Mapping) -> "WindowRect":
        return cls(int(d["x0"]), int(d["y0"]), int(d["side"]), d.get("grid_row"), d.get("grid_col"))


@dataclass(frozen=True)
class AnnotatedImage:
    """One annotated field image (or a quarter of one).

    ``offset`` locates this image inside the pixel file at ``path``; it is
    non-zero for quarter images, which share the parent's file.
    """

    image_id: str
    path: str
    width: int
    height: int
    boxes: tuple = ()
    split: Split = Split.A_TRAIN
    growth_stage: Optional[GrowthStage] = None
    offset: tuple = (0, 0)
    parent_id: Optional[str] = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.image_id}: image dimensions must be positive")
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "offset", tuple(int(v) for v in self.offset))
        object.__setattr__(self, "split", Split.parse(self.split))
        if self.growth_stage is not None:
            object.__setattr__(self, "growth_stage", GrowthStage(self.growth_stage))
        errors = [
            (self.image_id, i, f"{b} exceeds {self.width}x{self.height}")
            for i, b in enumerate(self.boxes)
            if not b.fits_inside(self.width, self.height)
        ]
        if errors:
            raise BoxOutOfBounds(errors)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "path": self.path,
            "growth_stage": self.growth_stage.value if self.growth_stage else None,
            "width": self.width,
            "height": self.height,
            "split": self.split.value,
            "offset": list(self.offset),
            "parent_id": self.parent_id,
            "boxes": [b.to_dict() for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AnnotatedImage":
        return cls(
            image_id=d["image_id"],
            path=d["path"],
            width=int(d["width"]),
            height=int(d["height"]),
            boxes=tuple(BoundingBox(**b) for b in d.get("boxes", [])),
            split=d["split"],
            growth_stage=d.get("growth_stage"),
            offset=tuple(d.get("offset", (0, 0))),
            parent_id=d.get("parent_id"),
        )


def contains(window: WindowRect, box: BoundingBox) -> bool:
    """Closed containment: the box may touch the window's edges."""
    return (box.x >= window.x0 and box.y >= window.y0
            and box.x1 <= window.x1 and box.y1 <= window.y1)


def intersects(window: WindowRect, box: BoundingBox) -> bool:
    """True iff the two rectangles overlap with positive area."""
    return (max(window.x0, box.x) < min(window.x1, box.x1)
            and max(window.y0, box.y) < min(window.y1, box.y1))


def quarter_image(img: AnnotatedImage) -> list[AnnotatedImage]:
    """Split an image into four equal quarters in row-major order.

    Boxes straddling a quarter boundary are clipped into every quarter they
    overlap, so the total box area is preserved.
    """
    if img.width % 2 or img.height % 2:
        raise OddDimension(f"{img.image_id}: {img.width}x{img.height} cannot be quartered")
    qw, qh = img.width // 2, img.height // 2
    quarters = []
    for q, (row, col) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        qx, qy = col * qw, row * qh
        boxes = []
        for b in img.boxes:
            clipped = b.clip(qx, qy, qx + qw, qy + qh)
            if clipped is not None:
                boxes.append(BoundingBox(clipped.x - qx, clipped.y - qy, clipped.w, clipped.h))
        quarters.append(replace(
            img,
            image_id=f"{img.image_id}_q{q}",
            width=qw,
            height=qh,
            boxes=tuple(boxes),
            offset=(img.offset[0] + qx, img.offset[1] + qy),
            parent_id=img.image_id,
        ))
    return quarters


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def percent_to_box(x: float, y: float, w: float, h: float, width: int, height: int) -> BoundingBox:
    """Convert percent-of-image rectangle coordinates to integer pixels."""
    return BoundingBox(
        _round_half_up(x * width / 100.0),
        _round_half_up(y * height / 100.0),
        _round_half_up(w * width / 100.0),
        _round_half_up(h * height / 100.0),
    )


def box_to_percent(box: BoundingBox, width: int, height: int) -> tuple[float, float, float, float]:
    return (100.0 * box.x / width, 100.0 * box.y / height,
            100.0 * box.w / width, 100.0 * box.h / height)


# ---------------------------------------------------------------------------
# Label Studio export ingestion
# ---------------------------------------------------------------------------

_UPLOAD_PREFIX = re.compile(r"^[0-9a-f]{8}-")
_STAGE_PATTERN = re.compile(r"(?<![A-Za-z0-9])(V8|V12)(?![0-9])", re.IGNORECASE)


def _task_image_ref(task: Mapping) -> str:
    data = task.get("data", task)
    ref = data.get("image") if isinstance(data, Mapping) else None
    if not isinstance(ref, str) or not ref:
        raise MalformedExport(f"task {task.get('id')!r} has no image reference")
    if "?d=" in ref:
        ref = ref.split("?d=", 1)[1]
    return re.sub(r"^[a-z0-9]+://", "", ref)


def _task_rectangles(task: Mapping) -> list[Mapping]:
    """Rectangle result dicts of a task, normalized to the full-export layout."""
    if "annotations" in task or "completions" in task:
        annotations = task.get("annotations") or task.get("completions") or []
        annotations = [a for a in annotations if not a.get("was_cancelled")]
        if not annotations:
            return []
        # first non-cancelled annotation wins when several annotators exist
        results = annotations[0].get("result", [])
        return [r for r in results if r.get("type") in ("rectanglelabels", "rectangle")]
    # JSON-MIN export: rectangles live directly under "label"
    rects = []
    for item in task.get("label", []) or []:
        rects.append({"value": item, "original_width": item.get("original_width"),
                      "original_height": item.get("original_height")})
    return rects


class _ImageIndex:
    def __init__(self, root: Path):
        self.root = root
        self._by_name: dict[str, Path] = {}
        for p in sorted(root.rglob("*")):
            if p.is_file():
                self._by_name.setdefault(p.name, p)

    def resolve(self, ref: str) -> Path:
        rel = ref.lstrip("/")
        direct = self.root / rel
        if direct.is_file():
            return direct
        name = Path(rel).name
        for candidate in (name, _UPLOAD_PREFIX.sub("", name)):
            if candidate in self._by_name:
                return self._by_name[candidate]
        raise MissingImageFile(f"image {ref!r} not found under {self.root}")


def _infer_stage(path: Path) -> Optional[GrowthStage]:
    for part in reversed(path.parts):
        m = _STAGE_PATTERN.search(part)
        if m:
            return GrowthStage(m.group(1).upper())
    return None


def ingest_annotations(
    export_file: PathLike,
    images_root: PathLike,
    split_map: Mapping[str, object],
    stage_map: Optional[Mapping[str, object]] = None,
) -> list[AnnotatedImage]:
    """Load a Label Studio JSON export into :class:`AnnotatedImage` records.

    Both the full JSON export (tasks with ``annotations``) and the JSON-MIN
    export are accepted. Image ids are the file stem with any upload hash
    prefix removed. The growth stage comes from ``stage_map`` or, failing
    that, a ``V8``/``V12`` token in the image path.

    Raises
    ------
    MalformedExport
        The export cannot be parsed, a rectangle is rotated, or recorded
        dimensions disagree with the decoded image.
    MissingImageFile
        A referenced image is absent from ``images_root``.
    BoxOutOfBounds
        One or more converted boxes fall outside their image; every
        offending box is listed.
    """
    export_file, images_root = Path(export_file), Path(images_root)
    try:
        tasks = json.loads(export_file.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedExport(f"cannot read export {export_file}: {exc}") from exc
    if isinstance(tasks, Mapping):
        tasks = [tasks]
    if not isinstance(tasks, list):
        raise MalformedExport("export must be a JSON list of tasks")

    stage_map = dict(stage_map or {})
    index = _ImageIndex(images_root)
    images, errors = [], []
    for task in tasks:
        if not isinstance(task, Mapping):
            raise MalformedExport(f"task entries must be objects, got {type(task).__name__}")
        path = index.resolve(_task_image_ref(task))
        image_id = _UPLOAD_PREFIX.sub("", path.stem)
        try:
            with Image.open(path) as im:
                width, height = im.size
        except OSError as exc:
            raise MalformedExport(f"{path}: cannot decode image header: {exc}") from exc

        boxes = []
        for i, rect in enumerate(_task_rectangles(task)):
            value = rect.get("value", {})
            ow, oh = rect.get("original_width"), rect.get("original_height")
            if ow is not None and oh is not None and (int(ow), int(oh)) != (width, height):
                raise MalformedExport(
                    f"{image_id}: export records {ow}x{oh} but image decodes as {width}x{height}")
            if abs(float(value.get("rotation", 0) or 0)) > 1e-9:
                raise MalformedExport(f"{image_id} box #{i}: rotated rectangles are not supported")
            try:
                box = percent_to_box(float(value["x"]), float(value["y"]),
                                     float(value["width"]), float(value["height"]), width, height)
            except KeyError as exc:
                raise MalformedExport(f"{image_id} box #{i}: missing {exc}") from exc
            except ValueError as exc:
                errors.append((image_id, i, str(exc)))
                continue
            if not box.fits_inside(width, height):
                errors.append((image_id, i, f"{box} exceeds {width}x{height}"))
                continue
            boxes.append(box)

        if image_id not in split_map:
            raise SplitAssignmentError(f"no split assigned for image {image_id!r}")
        stage = stage_map.get(image_id) or _infer_stage(path.relative_to(images_root))
        images.append(AnnotatedImage(
            image_id=image_id,
            path=str(path),
            width=width,
            height=height,
            boxes=tuple(boxes),
            split=Split.parse(split_map[image_id]),
            growth_stage=stage,
        ))
    if errors:
        raise BoxOutOfBounds(errors)
    if not images:
        logger.warning("export %s contains no tasks", export_file)
    return images


def write_image_manifests(images: Iterable[AnnotatedImage], manifest_dir: PathLike) -> list[Path]:
    """Write one JSON document per image; returns the written paths."""
    manifest_dir = Path(manifest_dir)
    manifest_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for img in images:
        p = manifest_dir / f"{img.image_id}.json"
        p.write_text(json.dumps(img.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(p)
    return written


def read_image_manifests(manifest_dir: PathLike) -> list[AnnotatedImage]:
    manifest_dir = Path(manifest_dir)
    return [AnnotatedImage.from_dict(json.loads(p.read_text()))
            for p in sorted(manifest_dir.glob("*.json"))]

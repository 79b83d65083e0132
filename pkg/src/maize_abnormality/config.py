"""Pipeline configuration file (YAML or JSON).

Relative paths are resolved against the config file's directory. The
output root can be overridden with the ``MAIZE_ABNORMALITY_OUTPUT_ROOT``
environment variable; ``--set dotted.key=value`` flags override anything.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .classifiers.svm import SvmConfig
from .exceptions import ConfigError
from .geometry import DEFAULT_TILE_SIDE
from .quantification import CategoryThresholds, Method
from .regression import RegressionConfig
from .segmentation import HsvThresholds

OUTPUT_ROOT_ENV = "MAIZE_ABNORMALITY_OUTPUT_ROOT"


@dataclass
class PathsConfig:
    annotations_export: Optional[Path] = None
    images_root: Optional[Path] = None
    split_map: Optional[Path] = None
    stage_map: Optional[Path] = None
    output_root: Path = Path("output")


@dataclass
class DatasetCounts:
    train_abnormal: int = 4966
    train_normal: int = 4966
    test_abnormal: int = 1211
    test_normal: int = 1211
    validation_fraction: float = 0.10

    def __post_init__(self):
        if min(self.train_abnormal, self.train_normal, self.test_abnormal, self.test_normal) < 0:
            raise ConfigError("dataset counts must be non-negative")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")


@dataclass
class Seeds:
    train_crops: int = 0
    test_crops: int = 1
    validation: int = 2
    cnn: int = 0
    svm: int = 0
    regression: int = 0


@dataclass
class CnnSettings:
    trunk: str = "efficientnet_b0"
    pretrained: bool = False
    head: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    tile_side: int = DEFAULT_TILE_SIDE
    datasets: DatasetCounts = field(default_factory=DatasetCounts)
    hsv: HsvThresholds = field(default_factory=HsvThresholds)
    window_thresholds: CategoryThresholds = field(default_factory=lambda: CategoryThresholds(Method.WINDOW, 5.0, 20.0))
    pixel_thresholds: CategoryThresholds = field(default_factory=lambda: CategoryThresholds(Method.PIXEL, 0.0415, 0.80))
    cnn: CnnSettings = field(default_factory=CnnSettings)
    svm: SvmConfig = field(default_factory=SvmConfig)
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    seeds: Seeds = field(default_factory=Seeds)
    write_masks: bool = False

    # -- derived objects --------------------------------------------------

    def head_config(self):
        from .classifiers.cnn import CustomHeadConfig
        return CustomHeadConfig(**self.cnn.head)

    def train_config(self):
        from .classifiers.cnn import TrainConfig
        return TrainConfig(**{"seed": self.seeds.cnn, **self.cnn.train})

    @property
    def output_root(self) -> Path:
        return self.paths.output_root

    def validate_inputs(self) -> None:
        """Check that every input path named in the config exists."""
        for name in ("annotations_export", "images_root", "split_map"):
            value = getattr(self.paths, name)
            if value is None:
                raise ConfigError(f"paths.{name} is required")
            if not Path(value).exists():
                raise ConfigError(f"paths.{name} does not exist: {value}")
        if self.paths.stage_map is not None and not Path(self.paths.stage_map).exists():
            raise ConfigError(f"paths.stage_map does not exist: {self.paths.stage_map}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["paths"] = {k: (str(v) if v is not None else None) for k, v in d["paths"].items()}
        for key in ("window_thresholds", "pixel_thresholds"):
            d[key] = {"low_upper": d[key]["low_upper"], "medium_upper": d[key]["medium_upper"]}
        return json.loads(json.dumps(d, default=str))


_SECTIONS = {
    "paths": PathsConfig,
    "datasets": DatasetCounts,
    "hsv": HsvThresholds,
    "cnn": CnnSettings,
    "svm": SvmConfig,
    "regression": RegressionConfig,
    "seeds": Seeds,
}


def _build(cls, values, section: str):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} settings: {exc}") from exc


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key!r}: {part!r} is not a section")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def config_from_dict(raw: dict, base_dir=".") -> PipelineConfig:
    raw = dict(raw or {})
    allowed = set(_SECTIONS) | {"tile_side", "categories", "write_masks"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    built = {name: _build(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}

    base_dir = Path(base_dir)
    paths = built["paths"]
    for f in fields(PathsConfig):
        value = getattr(paths, f.name)
        if value is not None:
            p = Path(value).expanduser()
            setattr(paths, f.name, p if p.is_absolute() else base_dir / p)
    env_root = os.environ.get(OUTPUT_ROOT_ENV)
    if env_root:
        paths.output_root = Path(env_root)

    categories = raw.get("categories") or {}
    try:
        window = CategoryThresholds(Method.WINDOW, **categories.get("window", {"low_upper": 5.0, "medium_upper": 20.0}))
        pixel = CategoryThresholds(Method.PIXEL, **categories.get("pixel", {"low_upper": 0.0415, "medium_upper": 0.80}))
        tile_side = int(raw.get("tile_side", DEFAULT_TILE_SIDE))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid category thresholds: {exc}") from exc
    if tile_side <= 0:
        raise ConfigError("tile_side must be positive")
    cfg = PipelineConfig(
        paths=paths, tile_side=tile_side, datasets=built["datasets"], hsv=built["hsv"],
        window_thresholds=window, pixel_thresholds=pixel, cnn=built["cnn"], svm=built["svm"],
        regression=built["regression"], seeds=built["seeds"], write_masks=bool(raw.get("write_masks", False)),
    )
    try:
        cfg.head_config()
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid cnn settings: {exc}") from exc
    return cfg


def load_config(path, overrides=None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(apply_overrides(raw, overrides), base_dir=path.parent)

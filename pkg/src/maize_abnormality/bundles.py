"""On-disk model bundles.

A bundle directory holds::

    bundle.json       kind, config snapshot, extra metadata
    metrics.jsonl     one JSON object per line (per-epoch log or fit diagnostics)
    transforms.npz    fitted transform parameters, for inspection
    estimator.joblib  the fitted estimator (sklearn models), or
    model.pt          torch weights (CNN; see ``WindowCNNClassifier.save``)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import joblib
import numpy as np

from .exceptions import MissingArtifact

BUNDLE_FILE = "bundle.json"
METRICS_FILE = "metrics.jsonl"
ARRAYS_FILE = "transforms.npz"
ESTIMATOR_FILE = "estimator.joblib"


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


@dataclass
class TrainedModelBundle:
    kind: str
    estimator: Any
    config: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def save(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = [directory / BUNDLE_FILE, directory / METRICS_FILE]
        written[0].write_text(json.dumps(
            _jsonable({"kind": self.kind, "config": self.config, "meta": self.meta}),
            indent=2, sort_keys=True) + "\n")
        with written[1].open("w") as fh:
            for row in self.metrics:
                fh.write(json.dumps(_jsonable(row), sort_keys=True) + "\n")
        if self.arrays:
            np.savez(directory / ARRAYS_FILE, **self.arrays)
            written.append(directory / ARRAYS_FILE)
        if hasattr(self.estimator, "save"):
            written.extend(self.estimator.save(directory))
        else:
            joblib.dump(self.estimator, directory / ESTIMATOR_FILE)
            written.append(directory / ESTIMATOR_FILE)
        return written

    @classmethod
    def load(cls, directory, kind: Optional[str] = None) -> "TrainedModelBundle":
        directory = Path(directory)
        if not (directory / BUNDLE_FILE).is_file():
            raise MissingArtifact(f"no model bundle at {directory}")
        header = json.loads((directory / BUNDLE_FILE).read_text())
        if kind is not None and header["kind"] != kind:
            raise ValueError(f"{directory} holds a {header['kind']!r} bundle, expected {kind!r}")
        metrics = []
        if (directory / METRICS_FILE).is_file():
            with (directory / METRICS_FILE).open() as fh:
                metrics = [json.loads(line) for line in fh if line.strip()]
        arrays = {}
        if (directory / ARRAYS_FILE).is_file():
            with np.load(directory / ARRAYS_FILE) as npz:
                arrays = {k: npz[k] for k in npz.files}
        if header["kind"] == "cnn":
            from .classifiers.cnn import WindowCNNClassifier
            estimator = WindowCNNClassifier.load(directory)
        else:
            estimator = joblib.load(directory / ESTIMATOR_FILE)
        return cls(kind=header["kind"], estimator=estimator, config=header.get("config", {}),
                   metrics=metrics, arrays=arrays, meta=header.get("meta", {}))

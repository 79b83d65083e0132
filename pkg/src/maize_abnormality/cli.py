"""Command-line driver: ingest, build-datasets, train, quantify, report.

Output layout under the output root::

    manifests/set_A/, manifests/set_B/, manifests/quarters/   AnnotatedImage JSON
    datasets/{train,val,test_random,grid}/                      header.json + tiles.jsonl
    datasets/tiles/...                                          tile PNGs
    datasets/regression_targets.json
    models/{cnn,svm,regressor}/                                 model bundles
    results/                                                    results.jsonl, accuracy.csv,
                                                                correlation.json, barplot_*.csv
    runs/                                                       one RunManifest per invocation
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
import uuid
from collections import defaultdict
from pathlib import Path
from typing import Optional

import numpy as np

from .bundles import TrainedModelBundle
from .config import OUTPUT_ROOT_ENV, PipelineConfig, load_config
from .exceptions import (BoxOutOfBounds, ConfigError, DegenerateVariance, MalformedExport, MissingArtifact,
                         MissingImageFile, OddDimension, SplitAssignmentError)
from .geometry import Split, ingest_annotations, quarter_image, read_image_manifests, write_image_manifests
from .imageio import load_rgb, save_mask
from .quantification import (Category, Method, QuantificationResult, accuracy_table, categorize,
                             emit_category_barplot_data, pearson_correlation, read_results,
                             window_probability, write_barplot_csv, write_results)
from .regression import aggregate_pixel_probability, train_regressor
from .segmentation import abnormal_pixel_mask, pixel_probability_ground_truth, window_pixel_target
from .tiling import (DatasetManifest, Label, build_grid_manifest, extract_tile_pixels, materialize_tiles,
                     read_dataset_manifest, sample_random_crops, split_train_validation,
                     write_dataset_manifest)

log = logging.getLogger("maize_abnormality")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

# bad configuration or bad input data, reported before any model work
VALIDATION_ERRORS = (ConfigError, MalformedExport, MissingImageFile, BoxOutOfBounds,
                     SplitAssignmentError, OddDimension)


# ---------------------------------------------------------------------------
# layout and run bookkeeping
# ---------------------------------------------------------------------------

class Layout:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.manifests = self.root / "manifests"
        self.datasets = self.root / "datasets"
        self.models = self.root / "models"
        self.results = self.root / "results"
        self.runs = self.root / "runs"

    def image_set(self, name: str) -> Path:
        return self.manifests / name

    def dataset(self, name: str) -> Path:
        return self.datasets / name

    @property
    def regression_targets(self) -> Path:
        return self.datasets / "regression_targets.json"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunRecorder:
    """Collects inputs, outputs and timings; written as ``runs/<run_id>.json``."""

    def __init__(self, command: str, cfg: PipelineConfig):
        self.run_id = f"{time.strftime('%Y%m%dT%H%M%S')}-{command}-{uuid.uuid4().hex[:8]}"
        self.command = command
        self.cfg = cfg
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def stage(self, name: str, started: float) -> None:
        self.timings[name] = round(time.perf_counter() - started, 3)

    def write(self, layout: Layout) -> Path:
        self.timings.setdefault("total", round(time.perf_counter() - self._t0, 3))
        root = layout.root.resolve()

        def entry(p: Path) -> dict:
            p = Path(p)
            rel = str(p.resolve().relative_to(root)) if p.resolve().is_relative_to(root) else str(p)
            return {"path": rel, "sha256": _sha256(p)}

        doc = {
            "run_id": self.run_id,
            "command": self.command,
            "config": self.cfg.to_dict(),
            "inputs": [entry(p) for p in sorted(set(self.inputs)) if Path(p).is_file()],
            "outputs": [entry(p) for p in sorted(set(self.outputs))],
            "timings": self.timings,
        }
        layout.runs.mkdir(parents=True, exist_ok=True)
        path = layout.runs / f"{self.run_id}.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _require(path: Path, what: str, hint: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifact(f"{what} not found at {path}; run `{hint}` first")
    return Path(path)


def _load_mapping(path: Optional[Path]) -> dict:
    """Read an image-id mapping from JSON (object) or two-column CSV."""
    if path is None:
        return {}
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with path.open(newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if rows and rows[0][0].strip().lower() in ("image_id", "image", "id"):
            rows = rows[1:]
        return {r[0].strip(): r[1].strip() for r in rows}
    data = json.loads(path.read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object mapping image id to value")
    return data


def _read_images(layout: Layout, name: str):
    _require(layout.image_set(name), f"image manifests {name!r}", "ingest")
    return read_image_manifests(layout.image_set(name))


def _read_dataset(layout: Layout, name: str) -> DatasetManifest:
    _require(layout.dataset(name) / "header.json", f"dataset {name!r}", "build-datasets")
    return read_dataset_manifest(layout.dataset(name))


def _load_bundle(layout: Layout, kind: str) -> TrainedModelBundle:
    _require(layout.models / kind / "bundle.json", f"{kind} model", f"train {kind}")
    return TrainedModelBundle.load(layout.models / kind, kind=kind)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: PipelineConfig, layout: Layout, run: RunRecorder) -> dict:
    cfg.validate_inputs()
    split_map = _load_mapping(cfg.paths.split_map)
    stage_map = _load_mapping(cfg.paths.stage_map)
    run.inputs += [p for p in (cfg.paths.annotations_export, cfg.paths.split_map, cfg.paths.stage_map) if p]
    try:
        images = ingest_annotations(cfg.paths.annotations_export, cfg.paths.images_root, split_map, stage_map)
    except SplitAssignmentError as exc:
        raise ConfigError(str(exc)) from exc
    if not images:
        log.warning("annotation export is empty; writing zero-image manifests")
    summary = {}
    for split, name in ((Split.A_TRAIN, "set_A"), (Split.B_TEST, "set_B")):
        chosen = [img for img in images if img.split is split]
        out = layout.image_set(name)
        out.mkdir(parents=True, exist_ok=True)
        for stale in out.glob("*.json"):
            stale.unlink()
        run.outputs += write_image_manifests(chosen, out)
        stages = defaultdict(int)
        for img in chosen:
            stages[img.growth_stage.value if img.growth_stage else "unknown"] += 1
        summary[name] = {"images": len(chosen), "boxes": sum(len(i.boxes) for i in chosen),
                         "by_stage": dict(sorted(stages.items()))}
    return summary


def cmd_build_datasets(cfg: PipelineConfig, layout: Layout, run: RunRecorder) -> dict:
    set_a = _read_images(layout, "set_A")
    set_b = _read_images(layout, "set_B")
    if not set_a or not set_b:
        raise MissingArtifact("set A and set B must both contain images; check the split map and re-run ingest")
    side, counts, seeds = cfg.tile_side, cfg.datasets, cfg.seeds

    t = time.perf_counter()
    crops = sample_random_crops(set_a, counts.train_abnormal, counts.train_normal,
                                seed=seeds.train_crops, side=side, name="train_random")
    train, val = split_train_validation(crops, counts.validation_fraction, seed=seeds.validation)
    train = train.subset("train", train.tiles)
    val = val.subset("val", val.tiles)
    test = sample_random_crops(set_b, counts.test_abnormal, counts.test_normal,
                               seed=seeds.test_crops, side=side, name="test_random")
    run.stage("sample", t)

    t = time.perf_counter()
    train = materialize_tiles(train, set_a, layout.datasets, "tiles/train")
    val = materialize_tiles(val, set_a, layout.datasets, "tiles/val")
    test = materialize_tiles(test, set_b, layout.datasets, "tiles/test_random")
    run.stage("materialize", t)

    quarters = [q for img in set_b for q in quarter_image(img)]
    qdir = layout.image_set("quarters")
    qdir.mkdir(parents=True, exist_ok=True)
    for stale in qdir.glob("*.json"):
        stale.unlink()
    run.outputs += write_image_manifests(quarters, qdir)
    grid = build_grid_manifest(quarters, side, name="grid")

    for name, manifest in (("train", train), ("val", val), ("test_random", test), ("grid", grid)):
        run.outputs += list(write_dataset_manifest(manifest, layout.dataset(name)))
    run.outputs += [layout.datasets / t.pixel_data_path for m in (train, val, test) for t in m.tiles]

    # regression targets: abnormal-pixel fraction of every abnormal set-A crop
    t = time.perf_counter()
    by_id = {img.image_id: img for img in set_a}
    abnormal = defaultdict(list)
    for tile in train.tiles + val.tiles:
        if tile.label is Label.ABNORMAL:
            abnormal[tile.source_image_id].append(tile)
    targets = {}
    for image_id in sorted(abnormal):
        img = by_id[image_id]
        mask = abnormal_pixel_mask(img, cfg.hsv)
        for tile in abnormal[image_id]:
            targets[tile.tile_id] = window_pixel_target(img, tile.rect, cfg.hsv, mask=mask)
    layout.regression_targets.write_text(json.dumps(targets, indent=1, sort_keys=True) + "\n")
    run.outputs.append(layout.regression_targets)
    run.stage("regression_targets", t)

    return {name: {"tiles": len(m), **m.class_counts}
            for name, m in (("train", train), ("val", val), ("test_random", test), ("grid", grid))} | {
        "quarters": len(quarters)}


def cmd_train(cfg: PipelineConfig, layout: Layout, run: RunRecorder, which: str) -> dict:
    out = layout.models / which
    if which == "cnn":
        from .classifiers.cnn import WindowCNNClassifier, train_cnn
        train, val = _read_dataset(layout, "train"), _read_dataset(layout, "val")
        model = WindowCNNClassifier(head_config=cfg.head_config(), trunk=cfg.cnn.trunk,
                                    pretrained=cfg.cnn.pretrained)
        bundle = train_cnn(model, train, val, cfg.train_config(), tiles_root=layout.datasets)
        summary = {"best_epoch": bundle.meta["best_epoch"], "final": bundle.metrics[-1]}
    elif which == "svm":
        from .classifiers.svm import train_svm
        train = _read_dataset(layout, "train")
        bundle = train_svm(train, cfg.svm, tiles_root=layout.datasets, random_state=cfg.seeds.svm)
        summary = bundle.metrics[-1]
    elif which == "regressor":
        _require(layout.regression_targets, "regression targets", "build-datasets")
        targets = json.loads(layout.regression_targets.read_text())
        tiles = [t for name in ("train", "val") for t in _read_dataset(layout, name).tiles
                 if t.label is Label.ABNORMAL]
        train = _read_dataset(layout, "train").subset("regression_train", tiles)
        bundle = train_regressor(train, targets, cfg.regression, tiles_root=layout.datasets)
        summary = bundle.metrics[-1]
    else:
        raise ConfigError(f"unknown model {which!r}; choose cnn, svm or regressor")
    run.outputs += bundle.save(out)
    return summary


def _quarter_pixels(parent_pixels: np.ndarray, q) -> np.ndarray:
    ox, oy = q.offset
    return parent_pixels[oy:oy + q.height, ox:ox + q.width]


def cmd_quantify(cfg: PipelineConfig, layout: Layout, run: RunRecorder, regression_only: bool = False) -> dict:
    quarters = _read_images(layout, "quarters")
    grid = _read_dataset(layout, "grid")
    regressor = _load_bundle(layout, "regressor").estimator
    if not regression_only:
        cnn = _load_bundle(layout, "cnn").estimator
        svm = _load_bundle(layout, "svm").estimator
    tiles_by_image = defaultdict(list)
    for t in grid.tiles:
        tiles_by_image[t.source_image_id].append(t)
    by_parent = defaultdict(list)
    for q in quarters:
        by_parent[q.path].append(q)

    from .classifiers.fusion import predict_windows

    side = grid.tile_side
    results = []
    for path in sorted(by_parent):
        parent = load_rgb(path)
        for q in sorted(by_parent[path], key=lambda q: q.image_id):
            pixels = _quarter_pixels(parent, q)
            tiles = tiles_by_image[q.image_id]
            if not tiles:
                raise MissingArtifact(f"grid manifest has no windows for {q.image_id}; re-run build-datasets")
            blocks = np.stack([extract_tile_pixels(q, t.rect, pixels) for t in tiles])
            mask = abnormal_pixel_mask(q, cfg.hsv, pixels)
            if cfg.write_masks:
                mask_path = layout.results / "masks" / f"{q.image_id}.png"
                save_mask(mask.bits, mask_path)
                run.outputs.append(mask_path)
            truth_window = window_probability([t.label for t in tiles], len(tiles))
            truth_pixel = pixel_probability_ground_truth(q, cfg.hsv, mask=mask)
            fractions = regressor.predict(blocks)
            pixel_prob = aggregate_pixel_probability(fractions, side, q.width, q.height)
            r = QuantificationResult(
                image_id=q.image_id,
                truth_window_prob=truth_window,
                truth_pixel_prob=truth_pixel,
                category_truth_window=categorize(truth_window, cfg.window_thresholds),
                category_truth_pixel=categorize(truth_pixel, cfg.pixel_thresholds),
                pixel_prob=pixel_prob,
                category_pixel=categorize(pixel_prob, cfg.pixel_thresholds),
            )
            if not regression_only:
                preds = predict_windows(cnn, svm, tiles, blocks)
                n = len(tiles)
                r.window_prob = window_probability(preds, n)
                r.window_prob_svm = window_probability([p.label_svm for p in preds], n)
                r.window_prob_cnn = window_probability([p.label_cnn for p in preds], n)
                r.category_window = categorize(r.window_prob, cfg.window_thresholds)
                r.category_window_svm = categorize(r.window_prob_svm, cfg.window_thresholds)
                r.category_window_cnn = categorize(r.window_prob_cnn, cfg.window_thresholds)
            results.append(r)
        del parent
    run.outputs.append(write_results(results, layout.results / "results.jsonl"))
    summary = cmd_report(cfg, layout, run)
    summary["images"] = len(results)
    return summary


def _fmt(value) -> str:
    return "" if value is None else f"{value:.2f}"


def cmd_report(cfg: PipelineConfig, layout: Layout, run: RunRecorder) -> dict:
    results_path = _require(layout.results / "results.jsonl", "results", "quantify")
    run.inputs.append(results_path)
    results = read_results(results_path)

    table = accuracy_table(results)
    acc_path = layout.results / "accuracy.csv"
    with acc_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "svm", "cnn", "fusion", "regression"])
        for row in table:
            writer.writerow([row["category"]] + [_fmt(row[k]) for k in ("svm", "cnn", "fusion", "regression")])

    notices = []
    correlation = {}
    pair_sets = {
        "truth": [(r.truth_window_prob, r.truth_pixel_prob) for r in results],
        "predicted": [(r.window_prob, r.pixel_prob) for r in results
                      if r.window_prob is not None and r.pixel_prob is not None],
    }
    for name, pairs in pair_sets.items():
        try:
            correlation[name] = pearson_correlation(pairs)
        except DegenerateVariance as exc:
            correlation[name] = None
            notices.append(f"{name} correlation undefined: {exc}")
    corr_path = layout.results / "correlation.json"
    corr_path.write_text(json.dumps({"pearson": correlation, "notices": notices}, indent=2, sort_keys=True) + "\n")

    written = [acc_path, corr_path]
    if any(r.window_prob is not None for r in results):
        written.append(write_barplot_csv(emit_category_barplot_data(results, Method.WINDOW),
                                         layout.results / "barplot_window.csv"))
    if any(r.pixel_prob is not None for r in results):
        written.append(write_barplot_csv(emit_category_barplot_data(results, Method.PIXEL),
                                         layout.results / "barplot_pixel.csv"))
    run.outputs += written
    for notice in notices:
        log.warning(notice)
    truth_counts = {c.display: sum(r.category_truth_window is c for r in results) for c in Category}
    return {"accuracy": table, "pearson": correlation, "notices": notices, "truth_window_counts": truth_counts}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maize-abnormality",
        description="Abnormality identification and quantification for UAV maize imagery.",
        epilog=f"The output root may be overridden with ${OUTPUT_ROOT_ENV} or --output-root.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", required=True, help="pipeline config file (YAML or JSON)")
    common.add_argument("--output-root", help="override paths.output_root")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set cnn.train.epochs=5 (repeatable)")
    common.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="parse annotations into set A/B image manifests")
    sub.add_parser("build-datasets", parents=[common], help="sample crops, split, build grid windows")
    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("which", choices=["cnn", "svm", "regressor"])
    p = sub.add_parser("quantify", parents=[common], help="score every quarter image, then report")
    p.add_argument("--regression-only", action="store_true", help="run only the pixel (regression) method")
    sub.add_parser("report", parents=[common], help="rebuild accuracy, correlation and bar-plot files")
    return parser


def _dispatch(args, cfg: PipelineConfig, layout: Layout, run: RunRecorder) -> dict:
    if args.command == "ingest":
        return cmd_ingest(cfg, layout, run)
    if args.command == "build-datasets":
        return cmd_build_datasets(cfg, layout, run)
    if args.command == "train":
        return cmd_train(cfg, layout, run, args.which)
    if args.command == "quantify":
        return cmd_quantify(cfg, layout, run, regression_only=args.regression_only)
    return cmd_report(cfg, layout, run)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.output_root:
            cfg.paths.output_root = Path(args.output_root)
        layout = Layout(cfg.output_root)
        layout.root.mkdir(parents=True, exist_ok=True)
        run = RunRecorder(args.command, cfg)
        summary = _dispatch(args, cfg, layout, run)
        run.write(layout)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"command": args.command, "run_id": run.run_id, "summary": summary},
                     indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

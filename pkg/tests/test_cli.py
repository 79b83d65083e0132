import hashlib
import json
import shutil

import pytest

from maize_abnormality.cli import main
from maize_abnormality.config import OUTPUT_ROOT_ENV
from maize_abnormality.quantification import read_barplot_csv, read_results
from maize_abnormality.synthetic import write_field_dataset
from maize_abnormality.tiling import read_dataset_manifest

CONFIG = """\
paths:
  annotations_export: export.json
  images_root: images
  split_map: splits.json
  output_root: out
datasets: {train_abnormal: 16, train_normal: 16, test_abnormal: 4, test_normal: 4, validation_fraction: 0.25}
seeds: {train_crops: 3, test_crops: 4, validation: 5}
cnn:
  trunk: tiny
  head: {conv_channels: [16, 16], attention_reduction: 4, fc_widths: [16, 8, 2]}
  train: {epochs: 2, batch_size: 8, learning_rate: 0.003}
regression: {iterations: 20}
"""

STAGES = [["ingest"], ["build-datasets"], ["train", "svm"], ["train", "regressor"], ["train", "cnn"],
          ["quantify"]]


def _run(cfg, *args):
    return main([*args, "--config", str(cfg)])


@pytest.fixture(scope="module")
def project(tmp_path_factory):
    root = tmp_path_factory.mktemp("field")
    write_field_dataset(root, n_images=4, n_test=2, seed=7)
    cfg = root / "config.yaml"
    cfg.write_text(CONFIG)
    codes = [_run(cfg, *stage) for stage in STAGES]
    return root, cfg, codes


@pytest.fixture(autouse=True)
def _no_env_root(monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)


def test_pipeline_succeeds(project):
    _, _, codes = project
    assert codes == [0] * len(STAGES)


def test_ingest_split_counts(project):
    root, _, _ = project
    assert len(list((root / "out/manifests/set_A").glob("*.json"))) == 2
    assert len(list((root / "out/manifests/set_B").glob("*.json"))) == 2
    assert len(list((root / "out/manifests/quarters").glob("*.json"))) == 8


def test_datasets_layout(project):
    root, _, _ = project
    ds = root / "out/datasets"
    train, val = read_dataset_manifest(ds / "train"), read_dataset_manifest(ds / "val")
    assert len(train) + len(val) == 32 and val.class_counts == {"normal": 4, "abnormal": 4}
    assert len(read_dataset_manifest(ds / "test_random")) == 8
    grid = read_dataset_manifest(ds / "grid")
    assert len(grid) == 8 * 4
    assert all((ds / t.pixel_data_path).is_file() for t in train.tiles)
    targets = json.loads((ds / "regression_targets.json").read_text())
    abnormal = {t.tile_id for m in (train, val) for t in m.tiles if t.label.value == "abnormal"}
    assert set(targets) == abnormal and all(0 <= v <= 1 for v in targets.values())


def test_model_bundles(project):
    root, _, _ = project
    for kind in ("cnn", "svm", "regressor"):
        header = json.loads((root / "out/models" / kind / "bundle.json").read_text())
        assert header["kind"] == kind
    assert len((root / "out/models/cnn/metrics.jsonl").read_text().splitlines()) == 2
    assert (root / "out/models/svm/transforms.npz").is_file()


def test_results_and_reports(project):
    root, _, _ = project
    res = root / "out/results"
    results = read_results(res / "results.jsonl")
    assert len(results) == 8 and all(r.is_consistent() for r in results)
    assert all(r.window_prob is not None and r.pixel_prob is not None for r in results)
    header = (res / "accuracy.csv").read_text().splitlines()[0]
    assert header == "category,svm,cnn,fusion,regression"
    for name in ("barplot_window.csv", "barplot_pixel.csv"):
        assert (res / name).read_text().startswith("image_id,truth_prob,pred_prob,truth_cat,pred_cat,method\n")
        assert len(read_barplot_csv(res / name)) == 8
    corr = json.loads((res / "correlation.json").read_text())
    assert set(corr["pearson"]) == {"truth", "predicted"}


def test_run_manifests_match_digests(project):
    root, _, _ = project
    runs = sorted((root / "out/runs").glob("*.json"))
    assert len(runs) >= len(STAGES)
    for run in runs:
        doc = json.loads(run.read_text())
        assert {"run_id", "config", "inputs", "outputs", "timings"} <= set(doc)
        for entry in doc["outputs"]:
            path = root / "out" / entry["path"]
            assert hashlib.sha256(path.read_bytes()).hexdigest() == entry["sha256"]


def test_rerun_is_byte_identical(project, tmp_path):
    root, cfg, _ = project
    files = ["datasets/train/tiles.jsonl", "datasets/grid/tiles.jsonl", "datasets/regression_targets.json",
             "manifests/quarters/field_002_q1.json", "results/results.jsonl", "results/barplot_pixel.csv"]
    before = {f: (root / "out" / f).read_bytes() for f in files}
    assert _run(cfg, "build-datasets") == 0
    assert _run(cfg, "quantify") == 0
    assert {f: (root / "out" / f).read_bytes() for f in files} == before


def test_regression_only_flag(project, tmp_path):
    root, cfg, _ = project
    out = tmp_path / "reg_only"
    shutil.copytree(root / "out", out, ignore=shutil.ignore_patterns("results", "cnn", "svm"))
    assert main(["quantify", "--regression-only", "--config", str(cfg), "--output-root", str(out)]) == 0
    results = read_results(out / "results/results.jsonl")
    assert all(r.window_prob is None and r.category_window is None and r.pixel_prob is not None
               for r in results)
    assert not (out / "results/barplot_window.csv").exists()


def test_env_var_sets_output_root(project, tmp_path, monkeypatch):
    _, cfg, _ = project
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "env_root"))
    assert _run(cfg, "ingest") == 0
    assert (tmp_path / "env_root/manifests/set_A").is_dir()


def test_missing_artifacts_exit_3(project, tmp_path):
    _, cfg, _ = project
    empty = str(tmp_path / "empty")
    for args in (["build-datasets"], ["train", "svm"], ["quantify"], ["report"]):
        assert main([*args, "--config", str(cfg), "--output-root", empty]) == 3


def test_config_errors_exit_2(project, tmp_path):
    _, cfg, _ = project
    assert main(["train", "forest", "--config", str(cfg)]) == 2
    assert main(["ingest", "--config", str(tmp_path / "nope.yaml")]) == 2
    assert main(["ingest", "--config", str(cfg), "--set", "datasets.validation_fraction=2"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(CONFIG.replace("export.json", "missing.json"))
    assert main(["ingest", "--config", str(bad), "--output-root", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o" / "manifests").exists()


def test_runtime_failure_exit_4(project, tmp_path):
    _, cfg, _ = project
    out = str(tmp_path / "o4")
    assert main(["ingest", "--config", str(cfg), "--output-root", out]) == 0
    too_many = ["--set", "datasets.train_normal=5", "--set", "tile_side=1000"]
    assert main(["build-datasets", "--config", str(cfg), "--output-root", out, *too_many]) == 4


def test_empty_export_writes_empty_manifests(tmp_path, caplog):
    (tmp_path / "images").mkdir()
    (tmp_path / "export.json").write_text("[]")
    (tmp_path / "splits.json").write_text("{}")
    cfg = tmp_path / "c.yaml"
    cfg.write_text(CONFIG)
    assert _run(cfg, "ingest") == 0
    assert list((tmp_path / "out/manifests/set_A").glob("*.json")) == []
    assert "empty" in caplog.text


def test_boxless_test_set_reports_notice(tmp_path):
    write_field_dataset(tmp_path, n_images=4, n_test=2, seed=1)
    export = json.loads((tmp_path / "export.json").read_text())
    for task in export[2:]:
        task["annotations"][0]["result"] = []
    (tmp_path / "export.json").write_text(json.dumps(export))
    cfg = tmp_path / "c.yaml"
    cfg.write_text(CONFIG.replace("test_abnormal: 4", "test_abnormal: 0"))
    for stage in (["ingest"], ["build-datasets"], ["train", "regressor"]):
        assert _run(cfg, *stage) == 0
    assert main(["quantify", "--regression-only", "--config", str(cfg)]) == 0
    results = read_results(tmp_path / "out/results/results.jsonl")
    assert {r.category_truth_window.display for r in results} == {"None"}
    corr = json.loads((tmp_path / "out/results/correlation.json").read_text())
    assert corr["pearson"]["truth"] is None and corr["notices"]

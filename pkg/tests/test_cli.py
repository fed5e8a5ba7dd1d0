import json
import subprocess
import sys

import numpy as np
import pytest

from drstage import cli, ensemble, models, serialize
from drstage.preprocess import RasterImage, write_png
from drstage.synthetic import generate_dataset_tree

FAST_CFG = {
    "max_epochs": 2,
    "batch_size": 2,
    "feature_dim": 32,
    "extractor_input": 48,
    "preprocess_size": 48,
    "image_size": 24,
    "width_scale": 0.25,
    "scale": 80.0,
    "intermediate_size": 128,
}


@pytest.fixture()
def workspace(tmp_path):
    raw = tmp_path / "raw"
    generate_dataset_tree(raw, per_class=2, seed=3, size=64)
    cfg_path = tmp_path / "cfg.json"
    cfg = dict(FAST_CFG, out=str(tmp_path / "run"))
    cfg_path.write_text(json.dumps(cfg))
    return tmp_path, raw, cfg_path


def run(argv):
    return cli.main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def test_preprocess_mirrors_tree(workspace, capsys):
    tmp, raw, cfg = workspace
    prepped = tmp / "prepped"
    assert run(["preprocess", "--config", cfg, "--in", raw, "--out-root", prepped]) == 0
    outputs = sorted(prepped.rglob("*.png"))
    assert len(outputs) == 10
    assert {p.parent.name for p in outputs} == {"0", "1", "2", "3", "4"}
    out = capsys.readouterr().out
    assert "class 0: 2 images" in out
    report = json.loads((prepped / "preprocess_report.json").read_text())
    assert report["processed"] == 10
    assert report["skipped"] == []


def test_preprocess_skips_black_image_with_warning(workspace, capsys):
    tmp, raw, cfg = workspace
    black = raw / "1" / "black.png"
    write_png(RasterImage(np.zeros((64, 64, 3), dtype=np.uint8)), black)
    prepped = tmp / "prepped"
    assert run(["preprocess", "--config", cfg, "--in", raw, "--out-root", prepped]) == 0
    captured = capsys.readouterr()
    assert "skipping" in captured.err
    report = json.loads((prepped / "preprocess_report.json").read_text())
    assert report["processed"] == 10
    assert len(report["skipped"]) == 1
    assert str(black) in report["skipped"][0]["path"]


def test_preprocess_missing_root(tmp_path):
    rc = run(["preprocess", "--in", tmp_path / "nope", "--out-root", tmp_path / "o"])
    assert rc == 2


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_cascade_writes_models_and_manifest(workspace):
    tmp, raw, cfg = workspace
    # cascade consumes images at extractor_input size; raw tree works directly
    assert run(["train", "--config", cfg, "--mode", "cascade", "--data", raw]) == 0
    out = tmp / "run"
    model_files = sorted(out.glob("cascade_stage*.drsm"))
    assert len(model_files) == 4
    doc = ensemble.read_manifest(out / "manifest.json")
    assert doc["scheme"] == "cascade"
    assert doc["extractor"]["feature_dim"] == 32
    assert len(list(out.glob("history_cascade_stage*.jsonl"))) == 4


def test_train_cascade_rerun_bitwise_identical(workspace):
    tmp, raw, cfg = workspace
    assert run(["train", "--config", cfg, "--mode", "cascade", "--data", raw]) == 0
    out = tmp / "run"
    first = {p.name: p.read_bytes() for p in out.glob("*.drsm")}
    first["manifest.json"] = (out / "manifest.json").read_bytes()
    assert run(["train", "--config", cfg, "--mode", "cascade", "--data", raw]) == 0
    for name, blob in first.items():
        assert (out / name).read_bytes() == blob, name


def test_train_ovo_writes_ten_models(workspace):
    tmp, raw, cfg = workspace
    assert run(["train", "--config", cfg, "--mode", "ovo", "--data", raw]) == 0
    out = tmp / "run"
    assert len(sorted(out.glob("ovo_*.drsm"))) == 10
    doc = ensemble.read_manifest(out / "manifest.json")
    assert tuple(tuple(p) for p in doc["pairs"]) == ensemble.OVO_PAIRS


def test_train_missing_dataset(workspace):
    tmp, _, cfg = workspace
    rc = run(["train", "--config", cfg, "--mode", "cascade", "--data", tmp / "nothing"])
    assert rc == 2


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

@pytest.fixture()
def trained(workspace):
    tmp, raw, cfg = workspace
    assert run(["train", "--config", cfg, "--mode", "cascade", "--data", raw]) == 0
    return tmp, raw, cfg, tmp / "run" / "manifest.json"


def test_eval_report_row_sums(trained):
    tmp, raw, cfg, manifest = trained
    assert run(["eval", "--config", cfg, "--manifest", manifest, "--data", raw]) == 0
    report = json.loads((tmp / "run" / "report.json").read_text())
    cm = np.asarray(report["confusion_matrix"])
    np.testing.assert_array_equal(cm.sum(axis=1), [2, 2, 2, 2, 2])
    assert report["scheme"] == "cascade"
    assert "binary_rates" in report
    assert (tmp / "run" / "report.txt").exists()


def test_eval_report_round_trips(trained):
    tmp, raw, cfg, manifest = trained
    assert run(["eval", "--config", cfg, "--manifest", manifest, "--data", raw]) == 0
    path = tmp / "run" / "report.json"
    text = path.read_text()
    doc = json.loads(text)
    again = json.dumps(cli.round_floats(doc), indent=2, sort_keys=True) + "\n"
    assert again == text


def test_eval_deterministic_bytes(trained):
    tmp, raw, cfg, manifest = trained
    assert run(["eval", "--config", cfg, "--manifest", manifest, "--data", raw]) == 0
    first = (tmp / "run" / "report.json").read_bytes()
    assert run(["eval", "--config", cfg, "--manifest", manifest, "--data", raw]) == 0
    assert (tmp / "run" / "report.json").read_bytes() == first


def test_eval_missing_manifest(workspace):
    tmp, raw, cfg = workspace
    rc = run(["eval", "--config", cfg, "--manifest", tmp / "no.json", "--data", raw])
    assert rc == 2


def test_eval_empty_dataset(trained, tmp_path):
    _, _, cfg, manifest = trained
    empty = tmp_path / "empty"
    for stage in range(5):
        (empty / str(stage)).mkdir(parents=True)
    assert run(["eval", "--config", cfg, "--manifest", manifest, "--data", empty]) == 2


# ---------------------------------------------------------------------------
# classify
# ---------------------------------------------------------------------------

def _all_normal_manifest(dirpath, input_hw=48, feature_dim=32):
    """Four heads rigged to always answer 'normal' (softmax argmax at 0)."""
    paths = []
    for i in range(4):
        head = models.init_weights(models.build_binary_head(feature_dim), seed=i)
        for name, value in head.weights.items():
            if name.endswith(("weights", "kernel")):
                head.weights[name] = np.zeros_like(value)
        head.weights["fc.bias"] = np.zeros_like(head.weights["fc.bias"])
        head.weights["out.bias"] = np.array([10.0, -10.0], dtype=np.float32)
        path = dirpath / f"normal{i}.drsm"
        serialize.save_model(head, path)
        paths.append(path.name)
    manifest = dirpath / "manifest.json"
    ensemble.write_manifest(
        manifest,
        "cascade",
        paths,
        extractor={
            "kind": "stub",
            "seed": 0,
            "input_hw": [input_hw, input_hw],
            "feature_dim": feature_dim,
        },
    )
    return manifest


def test_classify_stubbed_all_normal(workspace, capsys):
    tmp, raw, cfg = workspace
    manifest = _all_normal_manifest(tmp)
    image = next((raw / "0").glob("*.png"))
    assert run(["classify", "--config", cfg, "--manifest", manifest, "--image", image]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "No DR (0)"
    # one score line per stage
    assert sum("):" in line for line in out.splitlines()[1:]) == 5


def test_classify_all_black_exits_4(workspace, capsys):
    tmp, raw, cfg = workspace
    manifest = _all_normal_manifest(tmp)
    black = tmp / "black.png"
    write_png(RasterImage(np.zeros((64, 64, 3), dtype=np.uint8)), black)
    assert run(["classify", "--config", cfg, "--manifest", manifest, "--image", black]) == 4
    assert "no retinal foreground" in capsys.readouterr().err


def test_classify_unreadable_image(workspace):
    tmp, raw, cfg = workspace
    manifest = _all_normal_manifest(tmp)
    assert run(["classify", "--config", cfg, "--manifest", manifest, "--image", tmp / "no.png"]) == 2


def test_classify_ovo_prints_five_scores(workspace, capsys):
    tmp, raw, cfg = workspace
    assert run(["train", "--config", cfg, "--mode", "ovo", "--data", raw]) == 0
    manifest = tmp / "run" / "manifest.json"
    image = next((raw / "2").glob("*.png"))
    assert run(["classify", "--config", cfg, "--manifest", manifest, "--image", image]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert sum("):" in line for line in lines[1:]) == 5


# ---------------------------------------------------------------------------
# config handling + entry point
# ---------------------------------------------------------------------------

def test_cli_flag_overrides_config(workspace, capsys):
    tmp, raw, cfg = workspace
    prepped = tmp / "pp"
    rc = run(
        ["preprocess", "--config", cfg, "--in", raw, "--out-root", prepped,
         "--preprocess-size", "32"]
    )
    assert rc == 0
    err = capsys.readouterr().err
    assert '"preprocess_size": 32' in err  # resolved config echoed to the log
    from drstage.preprocess import read_image

    sample = next(prepped.rglob("*.png"))
    assert read_image(sample).width == 32


def test_unknown_config_key_rejected(workspace, tmp_path):
    _, raw, _ = workspace
    bad = tmp_path / "bad.json"
    bad.write_text('{"tpyo": 1}')
    rc = run(["preprocess", "--config", bad, "--in", raw, "--out-root", tmp_path / "o"])
    assert rc == 2


def test_eval_report_path_reproduces_published_binary_rates(tmp_path):
    # the cascade experiment's published outcome, injected at the report seam
    from drstage.metrics import ConfusionMatrix, metrics_report
    from test_metrics import CASCADE_5CLASS

    report = metrics_report(ConfusionMatrix(5, CASCADE_5CLASS), binary_collapse=True)
    path = tmp_path / "report.json"
    cli.dump_report(report, path)
    doc = json.loads(path.read_text())
    assert doc["binary_rates"]["sensitivity"] == 0.95775
    assert doc["binary_rates"]["specificity"] == 0.966
    assert doc["binary_rates"]["accuracy"] == 0.9594


def test_eval_report_path_reproduces_published_multiclass_accuracy(tmp_path):
    from drstage.metrics import ConfusionMatrix, metrics_report
    from test_metrics import ENSEMBLE_5CLASS

    report = metrics_report(ConfusionMatrix(5, ENSEMBLE_5CLASS))
    path = tmp_path / "report.json"
    cli.dump_report(report, path)
    doc = json.loads(path.read_text())
    assert doc["accuracy"] == 0.6636
    assert doc["kappa"] == 0.5795


def test_module_entry_point(workspace):
    tmp, raw, cfg = workspace
    proc = subprocess.run(
        [sys.executable, "-m", "drstage.cli", "preprocess", "--config", str(cfg),
         "--in", str(raw), "--out-root", str(tmp / "sub")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "processed 10" in proc.stdout

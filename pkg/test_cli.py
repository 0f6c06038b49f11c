import csv
import os

import numpy as np
import pytest
from typer.testing import CliRunner

from backend.data_pipeline.contours import Contour, write_contour
from backend.data_pipeline.data_handler import DataHandler, DatasetConfig
from backend.data_pipeline.image_io import read_pgm, write_pgm
from cli import app
from config import RunConfigError, build_run_config
from metrics.overlap import dice

runner = CliRunner()

TINY_ARCH = """
conv1   conv        out=4 kernel=3 pad=1
relu1   relu
score   score-conv
prob    softmax
"""


@pytest.fixture
def tiny_arch(tmp_path):
    path = tmp_path / "tiny.arch"
    path.write_text(TINY_ARCH)
    return str(path)


@pytest.fixture
def phantoms(tmp_path):
    out = tmp_path / "phantoms"
    result = runner.invoke(app, ["phantom", "--out", str(out), "--count", "3", "--seed", "4"])
    assert result.exit_code == 0, result.output
    return str(out / "manifest.csv")


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _square_contour(top, left, side):
    # pixel centers sit on integers; edges run along the half-integer grid
    x0, y0, x1, y1 = left - 0.5, top - 0.5, left + side - 0.5, top + side - 0.5
    return Contour(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))


def test_phantom_command_writes_a_loadable_dataset(phantoms):
    rows = _read_csv(phantoms)
    assert [r["id"] for r in rows] == ["phantom_a_0000", "phantom_a_0001", "phantom_a_0002"]
    assert all(r["pixel_spacing"] == "1.25\\1.25" for r in rows)
    assert read_pgm(os.path.join(os.path.dirname(phantoms), "phantom_a_0000.pgm")).shape == (64, 64)


def test_phantom_rejects_an_impossible_geometry(tmp_path):
    result = runner.invoke(app, ["phantom", "--out", str(tmp_path / "p"), "--size", "16"])
    assert result.exit_code == 1
    assert not (tmp_path / "p").exists()


def test_train_with_missing_manifest_fails_before_writing(tmp_path):
    weights = tmp_path / "w.fcnw"
    result = runner.invoke(app, ["train", "--manifest", str(tmp_path / "nope.csv"), "--weights", str(weights)])
    assert result.exit_code == 1
    assert "not found" in result.output
    assert not weights.exists()


def test_train_requires_an_output(phantoms):
    result = runner.invoke(app, ["train", "--manifest", phantoms])
    assert result.exit_code == 1
    assert "--weights" in result.output


def test_invalid_values_are_validation_errors(phantoms, tmp_path):
    result = runner.invoke(app, ["train", "--manifest", phantoms, "--weights", str(tmp_path / "w.fcnw"),
                                 "--structure", "atrium"])
    assert result.exit_code == 1
    config = tmp_path / "run.cfg"
    config.write_text("# run settings\nlearning_rate = 0.1\n")
    result = runner.invoke(app, ["train", "--manifest", phantoms, "--weights", str(tmp_path / "w.fcnw"),
                                 "--config", str(config)])
    assert result.exit_code == 1
    assert "learning_rate" in result.output


def test_flags_override_config_file(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text("# overrides\nmax_iter = 50\nbase_lr = 0.02\nstructure = epi\n")
    run = build_run_config("train", str(config), {"max_iter": 5})
    assert run.train.max_iter == 5
    assert run.train.base_lr == 0.02
    assert run.structure == "epi"
    assert run.train.num_classes == 2
    assert build_run_config("train", None, {"structure": "multi"}).train.num_classes == 3
    assert build_run_config("finetune").train.effective_base_lr == 0.001
    with pytest.raises(RunConfigError):
        build_run_config("train", str(tmp_path / "missing.cfg"))


def test_environment_defaults(monkeypatch):
    monkeypatch.setenv("CARDIAC_FCN_WORKERS", "3")
    monkeypatch.setenv("CARDIAC_FCN_LOG_LEVEL", "debug")
    run = build_run_config("phantom", None, {"workers": None})
    assert run.workers == 3
    assert run.log_level == "DEBUG"
    assert build_run_config("phantom", None, {"workers": 1}).workers == 1


def test_train_writes_weights_and_report(phantoms, tiny_arch, tmp_path):
    weights = tmp_path / "out" / "tiny.fcnw"
    args = ["train", "--manifest", phantoms, "--arch", tiny_arch, "--weights", str(weights),
            "--max-iter", "4", "--seed", "7"]
    result = runner.invoke(app, args)
    assert result.exit_code == 0, result.output
    assert "final Dice" in result.output
    report = _read_csv(str(tmp_path / "out" / "tiny_report.csv"))
    assert [int(r["iter"]) for r in report] == [1, 2, 3, 4]
    assert float(report[0]["lr"]) == 0.01

    first = weights.read_bytes()
    assert runner.invoke(app, args).exit_code == 0
    assert weights.read_bytes() == first


def test_finetune_reports_transplanted_layers(phantoms, tiny_arch, tmp_path):
    source = tmp_path / "source.fcnw"
    assert runner.invoke(app, ["train", "--manifest", phantoms, "--arch", tiny_arch, "--weights", str(source),
                               "--max-iter", "2"]).exit_code == 0
    result = runner.invoke(app, ["finetune", "--manifest", phantoms, "--arch", tiny_arch,
                                 "--source-weights", str(source), "--out", str(tmp_path / "ft"), "--max-iter", "2"])
    assert result.exit_code == 0, result.output
    assert "transplanted 2 layers" in result.output
    report = _read_csv(str(tmp_path / "ft" / "weights_report.csv"))
    assert float(report[0]["lr"]) == 0.001


def test_predict_writes_full_size_masks(phantoms, tiny_arch, tmp_path):
    weights = str(tmp_path / "tiny.fcnw")
    assert runner.invoke(app, ["train", "--manifest", phantoms, "--arch", tiny_arch, "--weights", weights,
                               "--max-iter", "2"]).exit_code == 0
    out = tmp_path / "pred"
    result = runner.invoke(app, ["predict", "--manifest", phantoms, "--arch", tiny_arch, "--weights", weights,
                                 "--out", str(out), "--workers", "2"])
    assert result.exit_code == 0, result.output
    rows = _read_csv(str(out / "predictions.csv"))
    assert len(rows) == 3
    for row in rows:
        assert read_pgm(str(out / row["mask"])).shape == (64, 64)
        assert (row["contour"] == "") or (out / row["contour"]).exists()


def test_predict_rejects_mismatched_weights(phantoms, tiny_arch, tmp_path):
    weights = str(tmp_path / "tiny.fcnw")
    assert runner.invoke(app, ["train", "--manifest", phantoms, "--arch", tiny_arch, "--weights", weights,
                               "--max-iter", "1"]).exit_code == 0
    result = runner.invoke(app, ["predict", "--manifest", phantoms, "--weights", weights, "--out", str(tmp_path / "p")])
    assert result.exit_code == 2


def _evaluation_fixture(tmp_path, shift):
    """One 40x40 image with a 10x10 square endocardium and a predicted square shifted by `shift` columns."""
    write_pgm(np.zeros((40, 40), dtype=np.uint16), str(tmp_path / "img.pgm"))
    write_contour(_square_contour(10, 10, 10), str(tmp_path / "img_endo.txt"))
    (tmp_path / "manifest.csv").write_text("id,image,contour_endo,contour_epi\nimg,img.pgm,img_endo.txt,\n")

    pred_dir = tmp_path / "pred"
    pred_dir.mkdir()
    mask = np.zeros((40, 40), dtype=np.uint16)
    mask[10:20, 10 + shift:20 + shift] = 1
    write_pgm(mask, str(pred_dir / "img_mask.pgm"))
    (pred_dir / "predictions.csv").write_text("id,structure,mask,contour\nimg,endo,img_mask.pgm,\n")
    return str(tmp_path / "manifest.csv"), str(pred_dir / "predictions.csv")


def test_evaluate_perfect_prediction(tmp_path):
    manifest, predictions = _evaluation_fixture(tmp_path, shift=0)
    out = tmp_path / "metrics.csv"
    result = runner.invoke(app, ["evaluate", "--manifest", manifest, "--predictions", predictions, "--out", str(out)])
    assert result.exit_code == 0, result.output
    rows = _read_csv(str(out))
    assert float(rows[0]["dice"]) == 1.0
    assert rows[1]["id"] == "summary"
    assert rows[1]["good_contour"] == "100.00"


def test_evaluate_half_overlap(tmp_path):
    manifest, predictions = _evaluation_fixture(tmp_path, shift=5)
    out = tmp_path / "metrics.csv"
    result = runner.invoke(app, ["evaluate", "--manifest", manifest, "--predictions", predictions, "--out", str(out)])
    assert result.exit_code == 0, result.output
    row = _read_csv(str(out))[0]
    assert float(row["dice"]) == pytest.approx(0.5)
    assert float(row["jaccard"]) == pytest.approx(1 / 3)


def test_every_command_accepts_the_common_flags(tmp_path, tiny_arch, phantoms):
    common = ["--arch", tiny_arch, "--weights", str(tmp_path / "unused.fcnw"), "--seed", "3", "--k-classes", "2"]
    manifest, predictions = _evaluation_fixture(tmp_path, shift=0)
    out = tmp_path / "metrics.csv"
    result = runner.invoke(app, ["evaluate", "--manifest", manifest, "--predictions", predictions,
                                 "--out", str(out)] + common)
    assert result.exit_code == 0, result.output
    assert float(_read_csv(str(out))[0]["dice"]) == 1.0

    result = runner.invoke(app, ["phantom", "--manifest", phantoms, "--out", str(tmp_path / "more"),
                                 "--count", "1"] + common)
    assert result.exit_code == 0, result.output
    assert (tmp_path / "more" / "manifest.csv").exists()


def test_evaluate_rejects_id_mismatch(tmp_path):
    manifest, predictions = _evaluation_fixture(tmp_path, shift=0)
    with open(predictions, "w") as f:
        f.write("id,structure,mask,contour\nother,endo,img_mask.pgm,\n")
    out = tmp_path / "metrics.csv"
    result = runner.invoke(app, ["evaluate", "--manifest", manifest, "--predictions", predictions, "--out", str(out)])
    assert result.exit_code == 1
    assert "img" in result.output
    assert not out.exists()


@pytest.mark.slow
def test_end_to_end_overfit(tmp_path):
    data = tmp_path / "data"
    assert runner.invoke(app, ["phantom", "--out", str(data), "--count", "32"]).exit_code == 0
    manifest = str(data / "manifest.csv")
    weights = str(tmp_path / "lv.fcnw")
    result = runner.invoke(app, ["train", "--manifest", manifest, "--weights", weights, "--max-iter", "300"])
    assert result.exit_code == 0, result.output
    final = [line for line in result.output.splitlines() if line.startswith("final Dice")][-1]
    assert float(final.split()[-1]) >= 0.90

    out = tmp_path / "pred"
    assert runner.invoke(app, ["predict", "--manifest", manifest, "--weights", weights,
                               "--out", str(out)]).exit_code == 0
    cases = DataHandler(manifest, DatasetConfig(structure="endo")).load_cases()
    for case in cases:
        truth = DataHandler(manifest).prepare(case, 0)[0].mask
        predicted = read_pgm(str(out / f"{case.case_id}_mask.pgm")) > 0
        assert dice(predicted, truth) >= 0.90

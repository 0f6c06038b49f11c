"""
Command-line entry point.

    python cli.py phantom  --out data/phantoms --count 32
    python cli.py train    --manifest data/phantoms/manifest.csv --weights lv.fcnw --max-iter 300
    python cli.py finetune --manifest data/rv/manifest.csv --source-weights lv.fcnw --weights rv.fcnw
    python cli.py predict  --manifest data/test/manifest.csv --weights lv.fcnw --out predictions/
    python cli.py evaluate --manifest data/test/manifest.csv --predictions predictions/predictions.csv --out metrics.csv

Exit codes: 0 success, 1 invalid input or configuration, 2 failure while running.
"""

import csv
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Tuple

import numpy as np
import typer
from dotenv import load_dotenv
from pydantic import ValidationError

from backend.data_pipeline.contours import structure_mask, write_contour
from backend.data_pipeline.data_handler import Case, DataHandler, DatasetConfig, ManifestError, load_dataset
from backend.data_pipeline.image_io import read_image, write_pgm
from backend.phantom.generator import generate, write_phantom_dataset
from backend.training.trainer import fine_tune, train, write_report_csv
from config import RunConfig, RunConfigError, build_run_config, check_paths
from fcn.model import FCNModel
from fcn.network_spec import default_spec
from fcn.weights import init_xavier, load_weights, save_weights
from metrics.contour_extraction import mask_to_contour
from metrics.evaluation import evaluate_many, write_metrics_csv

logger = logging.getLogger("cardiac_fcn.cli")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
INVALID_INPUT = (RunConfigError, ValidationError, ManifestError)
PREDICTIONS_NAME = "predictions.csv"

app = typer.Typer(add_completion=False, help="Train, fine-tune, run and evaluate FCN ventricle segmentation.")


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )
    logging.getLogger("cardiac_fcn").setLevel(level)


def _run(command: str, config: Optional[str], flags: dict, action: Callable[[RunConfig], None]) -> None:
    load_dotenv()
    try:
        run = build_run_config(command, config, flags)
        _setup_logging(run.log_level)
        check_paths(run)
        action(run)
    except INVALID_INPUT as e:
        logger.error(f"{command}: {e}")
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_INVALID)
    except Exception as e:
        logger.exception(f"{command} failed")
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_RUNTIME)


def _spec(run: RunConfig):
    return default_spec(num_classes=run.num_classes, path=run.arch)


def _dataset_config(run: RunConfig, train: bool) -> DatasetConfig:
    return DatasetConfig(structure=run.structure, preset=run.preset, train=train, workers=run.workers)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _train_outputs(run: RunConfig, store, report) -> None:
    _ensure_parent(run.weights)
    save_weights(store, run.weights)
    write_report_csv(report, run.report_path)
    typer.echo(f"weights: {run.weights}")
    typer.echo(f"report: {run.report_path}")
    if report.final_dice is not None:
        typer.echo(f"final Dice {report.final_dice:.4f}")


def _train_data(run: RunConfig):
    dataset = load_dataset(run.manifest, _dataset_config(run, train=True))
    dev = [s for s in load_dataset(run.dev_manifest or run.manifest, _dataset_config(run, train=False))
           if s.mask.any()]
    return dataset, dev


def _do_train(run: RunConfig) -> None:
    spec = _spec(run)
    dataset, dev = _train_data(run)
    store, report = train(spec, init_xavier(spec, run.seed), dataset, run.train, dev=dev, progress=True)
    _train_outputs(run, store, report)


def _do_finetune(run: RunConfig) -> None:
    spec = _spec(run)
    dataset, dev = _train_data(run)
    store, report = fine_tune(spec, run.source_weights, dataset, run.train, dev=dev, progress=True)
    typer.echo(f"transplanted {len(report.transplanted)} layers")
    _train_outputs(run, store, report)


def _predict_case(model: FCNModel, handler: DataHandler, run: RunConfig, case: Case, index: int) -> List[str]:
    started = time.perf_counter()
    sample = handler.prepare(case, index)[0]
    labels = model.predict_labels(sample.image[None, None])[0]
    full = np.zeros(case.pixels.shape, dtype=np.uint16)
    top, left = sample.offset
    full[top:top + labels.shape[0], left:left + labels.shape[1]] = labels

    mask_name = f"{case.case_id}_mask.pgm"
    write_pgm(full, os.path.join(run.out, mask_name))
    contour = mask_to_contour(full > 0)
    contour_name = ""
    if contour is None:
        logger.warning(f"{case.case_id}: empty prediction, no contour written")
    else:
        contour_name = f"{case.case_id}_contour.txt"
        write_contour(contour, os.path.join(run.out, contour_name))
    logger.info(f"{case.case_id}: {1000 * (time.perf_counter() - started):.1f} ms")
    return [case.case_id, run.structure, mask_name, contour_name]


def _do_predict(run: RunConfig) -> None:
    spec = _spec(run)
    model = FCNModel(spec, load_weights(run.weights, spec))
    handler = DataHandler(run.manifest, _dataset_config(run, train=False))
    cases = handler.load_cases()
    os.makedirs(run.out, exist_ok=True)
    with ThreadPoolExecutor(max_workers=run.workers) as executor:
        rows = list(executor.map(lambda item: _predict_case(model, handler, run, item[1], item[0]),
                                 enumerate(cases)))
    path = os.path.join(run.out, PREDICTIONS_NAME)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "structure", "mask", "contour"])
        writer.writerows(rows)
    typer.echo(f"predicted {len(rows)} images into {run.out}")


def _read_predictions(path: str) -> Tuple[str, dict]:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    if rows and "mask" not in rows[0]:
        raise RunConfigError(f"{path}: missing column 'mask'")
    return base, {row["id"]: row for row in rows}


def _evaluation_targets(structure: str) -> List[Tuple[str, Optional[int]]]:
    """(reported structure, label value) pairs; None means any foreground label."""
    if structure == "multi":
        return [("myo", 1), ("endo", 2)]
    return [(structure, None)]


def _do_evaluate(run: RunConfig) -> None:
    handler = DataHandler(run.manifest, _dataset_config(run, train=False))
    cases = [c for c in handler.load_cases() if handler.has_truth(c)]
    base, predictions = _read_predictions(run.predictions)

    truth_ids, predicted_ids = [c.case_id for c in cases], set(predictions)
    for case_id in truth_ids:
        if case_id not in predicted_ids:
            raise RunConfigError(f"no prediction for '{case_id}'")
    extra = sorted(predicted_ids - set(truth_ids))
    if extra:
        raise RunConfigError(f"prediction '{extra[0]}' has no ground truth")

    jobs = []
    for case in cases:
        h, w = case.pixels.shape
        labels, _ = read_image(os.path.join(base, predictions[case.case_id]["mask"]))
        if labels.shape != (h, w):
            raise RunConfigError(f"{case.case_id}: prediction is {labels.shape}, image is {(h, w)}")
        truth = structure_mask(case.endo, case.epi, run.structure, h, w)
        for name, value in _evaluation_targets(run.structure):
            expert = {"endo": case.endo, "epi": case.epi}.get(name)
            jobs.append(dict(
                pred_mask=labels > 0 if value is None else labels == value,
                truth_mask=truth > 0 if value is None else truth == value,
                truth_contour=expert,
                spacing=case.spacing,
                image_id=case.case_id,
                structure=name,
            ))
    rows = evaluate_many(jobs, workers=run.workers)
    _ensure_parent(run.out)
    for summary in write_metrics_csv(rows, run.out):
        dice = summary.mean["dice"]
        typer.echo(f"{summary.structure}: Dice {dice:.4f}, good contours {summary.good_contour_pct:.2f}%")
    typer.echo(f"metrics: {run.out}")


def _do_phantom(run: RunConfig) -> None:
    cases = generate(run.phantom, workers=run.workers)
    manifest = write_phantom_dataset(cases, run.out)
    typer.echo(f"manifest: {manifest}")


CONFIG = typer.Option(None, "--config", help="key = value configuration file")
MANIFEST = typer.Option(None, "--manifest", help="CSV manifest of images and contours")
ARCH = typer.Option(None, "--arch", help="network spec file (default: bundled architecture)")
WEIGHTS = typer.Option(None, "--weights", help="weight file")
OUT = typer.Option(None, "--out")
SEED = typer.Option(None, "--seed")
WORKERS = typer.Option(None, "--workers", help="worker threads (default: available cores)")
K_CLASSES = typer.Option(None, "--k-classes", help="class count (default from the structure)")
STRUCTURE = typer.Option(None, "--structure", help="endo, epi, myo or multi")
PRESET = typer.Option(None, "--preset", help="none, sunnybrook, lvsc or rvsc")

DEV_MANIFEST = typer.Option(None, "--dev-manifest", help="development split (default: the training manifest)")
TRAIN_WEIGHTS = typer.Option(None, "--weights", help="output weight file (default: <out>/weights.fcnw)")
MAX_ITER = typer.Option(None, "--max-iter")
BASE_LR = typer.Option(None, "--base-lr")
EPOCHS = typer.Option(None, "--epochs")
BATCH_SIZE = typer.Option(None, "--batch-size")
REPORT = typer.Option(None, "--report", help="training report CSV (default: next to the weights)")


def _training_flags(flags: dict) -> dict:
    out = flags.pop("out")
    if out is not None and flags["weights"] is None:
        flags["weights"] = os.path.join(out, "weights.fcnw")
    return flags


@app.command("train", help="Train from Xavier initialization.")
def train_command(
    config: Optional[str] = CONFIG,
    manifest: Optional[str] = MANIFEST,
    dev_manifest: Optional[str] = DEV_MANIFEST,
    arch: Optional[str] = ARCH,
    weights: Optional[str] = TRAIN_WEIGHTS,
    out: Optional[str] = OUT,
    seed: Optional[int] = SEED,
    workers: Optional[int] = WORKERS,
    k_classes: Optional[int] = K_CLASSES,
    max_iter: Optional[int] = MAX_ITER,
    base_lr: Optional[float] = BASE_LR,
    epochs: Optional[int] = EPOCHS,
    batch_size: Optional[int] = BATCH_SIZE,
    structure: Optional[str] = STRUCTURE,
    preset: Optional[str] = PRESET,
    report: Optional[str] = REPORT,
):
    flags = dict(locals())
    flags.pop("config")
    _run("train", config, _training_flags(flags), _do_train)


@app.command("finetune", help="Fine-tune from a saved model (base_lr 0.001 by default).")
def finetune_command(
    config: Optional[str] = CONFIG,
    manifest: Optional[str] = MANIFEST,
    dev_manifest: Optional[str] = DEV_MANIFEST,
    arch: Optional[str] = ARCH,
    weights: Optional[str] = TRAIN_WEIGHTS,
    source_weights: Optional[str] = typer.Option(None, "--source-weights", help="model to fine-tune from"),
    out: Optional[str] = OUT,
    seed: Optional[int] = SEED,
    workers: Optional[int] = WORKERS,
    k_classes: Optional[int] = K_CLASSES,
    max_iter: Optional[int] = MAX_ITER,
    base_lr: Optional[float] = BASE_LR,
    epochs: Optional[int] = EPOCHS,
    batch_size: Optional[int] = BATCH_SIZE,
    structure: Optional[str] = STRUCTURE,
    preset: Optional[str] = PRESET,
    report: Optional[str] = REPORT,
):
    flags = dict(locals())
    flags.pop("config")
    _run("finetune", config, _training_flags(flags), _do_finetune)


@app.command("predict", help="Segment every image of a manifest.")
def predict(
    config: Optional[str] = CONFIG,
    manifest: Optional[str] = MANIFEST,
    arch: Optional[str] = ARCH,
    weights: Optional[str] = WEIGHTS,
    out: Optional[str] = typer.Option(None, "--out", help="output directory"),
    seed: Optional[int] = SEED,
    workers: Optional[int] = WORKERS,
    k_classes: Optional[int] = K_CLASSES,
    structure: Optional[str] = STRUCTURE,
    preset: Optional[str] = PRESET,
):
    flags = dict(locals())
    flags.pop("config")
    _run("predict", config, flags, _do_predict)


@app.command("evaluate", help="Score predictions against ground truth.")
def evaluate(
    config: Optional[str] = CONFIG,
    manifest: Optional[str] = MANIFEST,
    predictions: Optional[str] = typer.Option(None, "--predictions", help="predictions.csv written by predict"),
    out: Optional[str] = typer.Option(None, "--out", help="metrics CSV"),
    arch: Optional[str] = ARCH,
    weights: Optional[str] = WEIGHTS,
    seed: Optional[int] = SEED,
    workers: Optional[int] = WORKERS,
    k_classes: Optional[int] = K_CLASSES,
    structure: Optional[str] = STRUCTURE,
):
    flags = dict(locals())
    flags.pop("config")
    _run("evaluate", config, flags, _do_evaluate)


@app.command("phantom", help="Write a synthetic phantom dataset.")
def phantom(
    config: Optional[str] = CONFIG,
    manifest: Optional[str] = MANIFEST,
    arch: Optional[str] = ARCH,
    weights: Optional[str] = WEIGHTS,
    out: Optional[str] = typer.Option(None, "--out", help="output directory"),
    count: Optional[int] = typer.Option(None, "--count"),
    size: Optional[int] = typer.Option(None, "--size"),
    family: Optional[str] = typer.Option(None, "--family", help="A (LV-like) or B (RV-like crescent)"),
    seed: Optional[int] = SEED,
    noise_sd: Optional[float] = typer.Option(None, "--noise-sd"),
    workers: Optional[int] = WORKERS,
    k_classes: Optional[int] = K_CLASSES,
):
    flags = dict(locals())
    flags.pop("config")
    _run("phantom", config, flags, _do_phantom)


if __name__ == "__main__":
    app()

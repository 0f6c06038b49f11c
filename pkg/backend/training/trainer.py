"""
Trainer Module
--------------
Single-stage end-to-end training of an FCN with SGD + momentum under a
polynomial learning-rate decay, and fine-tuning from a saved model.

One thread owns the weights and optimizer state. Batches are assembled ahead of
time by a prefetch thread feeding a bounded queue, in an order drawn from the
seeded generator, so results do not depend on timing.
"""

import csv
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, root_validator, validator
from tqdm import tqdm

from autodiff.tensor import NonFiniteError
from backend.data_pipeline.augmentation import Sample
from backend.training.optimizer import OptimizerState, sgd_step
from fcn.model import FCNModel
from fcn.network_spec import NetworkSpec
from fcn.weights import WeightStore, init_xavier, load_weights, missing_layers
from metrics.overlap import mean_foreground_dice

logger = logging.getLogger("cardiac_fcn.trainer")

DEFAULT_BASE_LR = 0.01
FINE_TUNE_BASE_LR = 0.001
REPORT_COLUMNS = ("iter", "lr", "loss", "epoch", "wall_ms")


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


class TrainConfig(BaseModel):
    """
    Training hyper-parameters.

    base_lr left unset resolves to 0.01, or 0.001 for fine-tuning. max_iter left
    unset resolves to ceil(epochs * training-set size / batch_size), where the
    training set is the augmented one.
    """
    base_lr: Optional[float] = None
    power: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 10
    batch_size: int = 1
    max_iter: Optional[int] = None
    seed: int = 0
    fine_tune: bool = False
    num_classes: int = 2
    eval_every: int = 0  # 0: once per epoch
    dropout: bool = True
    prefetch: int = 4

    @validator("base_lr")
    def _positive_lr(cls, lr):
        if lr is not None and lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {lr}")
        return lr

    @validator("momentum")
    def _momentum_range(cls, momentum):
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        return momentum

    @validator("weight_decay", "eval_every", "prefetch")
    def _non_negative(cls, value, field):
        if value < 0:
            raise ValueError(f"{field.name} must be >= 0, got {value}")
        return value

    @validator("power")
    def _positive_power(cls, power):
        if power <= 0:
            raise ValueError(f"power must be > 0, got {power}")
        return power

    @validator("epochs", "batch_size")
    def _at_least_one(cls, value, field):
        if value < 1:
            raise ValueError(f"{field.name} must be >= 1, got {value}")
        return value

    @validator("max_iter")
    def _positive_max_iter(cls, value):
        if value is not None and value < 1:
            raise ValueError(f"max_iter must be >= 1, got {value}")
        return value

    @root_validator(skip_on_failure=True)
    def _enough_classes(cls, values):
        if values["num_classes"] < 2:
            raise ValueError("num_classes must be >= 2")
        return values

    @property
    def effective_base_lr(self) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return FINE_TUNE_BASE_LR if self.fine_tune else DEFAULT_BASE_LR

    def resolve_max_iter(self, num_samples: int) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return max(1, math.ceil(self.epochs * num_samples / self.batch_size))


def poly_lr(cfg: TrainConfig, iteration: int, max_iter: Optional[int] = None) -> float:
    """base_lr * (1 - iteration / max_iter) ** power, for 0 <= iteration <= max_iter."""
    max_iter = max_iter if max_iter is not None else cfg.max_iter
    if max_iter is None:
        raise ValueError("poly_lr needs max_iter (set it on the config or pass it)")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} is outside [0, {max_iter}]")
    return cfg.effective_base_lr * (1.0 - iteration / max_iter) ** cfg.power


@dataclass(frozen=True)
class IterationRecord:
    iteration: int  # 1-based
    lr: float
    loss: float
    epoch: int
    wall_ms: float


@dataclass
class TrainReport:
    max_iter: int
    base_lr: float
    records: List[IterationRecord] = field(default_factory=list)
    dev_dice: List[Tuple[int, float]] = field(default_factory=list)  # (iteration, mean foreground Dice)
    transplanted: List[str] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    @property
    def learning_rates(self) -> List[float]:
        return [r.lr for r in self.records]

    @property
    def final_dice(self) -> Optional[float]:
        return self.dev_dice[-1][1] if self.dev_dice else None

    def iterations_to_reach(self, dice: float) -> Optional[int]:
        """First evaluated iteration whose development Dice is >= `dice`, or None."""
        for iteration, value in self.dev_dice:
            if value >= dice:
                return iteration
        return None


def write_report_csv(report: TrainReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for r in report.records:
            writer.writerow([r.iteration, repr(r.lr), repr(r.loss), r.epoch, f"{r.wall_ms:.3f}"])
    logger.info(f"Wrote training report ({len(report.records)} iterations) to {path}")


def evaluate_dice(model: FCNModel, samples: Sequence[Sample]) -> float:
    """Mean foreground Dice of the model's label maps over `samples`."""
    if not samples:
        raise ValueError("cannot evaluate on an empty sample list")
    scores = []
    for sample in samples:
        labels = model.predict_labels(sample.image[None, None])[0]
        scores.append(mean_foreground_dice(labels, sample.mask, model.spec.num_classes))
    return float(np.mean(scores))


def _batch_plan(num_samples: int, batch_size: int, max_iter: int,
                rng: np.random.Generator) -> Iterator[Tuple[int, np.ndarray]]:
    """(epoch, sample indices) for every iteration; a fresh permutation each epoch."""
    iteration, epoch = 0, 0
    while iteration < max_iter:
        epoch += 1
        order = rng.permutation(num_samples)
        for start in range(0, num_samples, batch_size):
            if iteration == max_iter:
                return
            yield epoch, order[start:start + batch_size]
            iteration += 1


def _stack(samples: Sequence[Sample], indices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    chosen = [samples[i] for i in indices]
    shapes = {s.image.shape for s in chosen}
    if len(shapes) != 1:
        raise ValueError(f"a batch needs equally sized samples, got {sorted(shapes)}; use batch_size=1")
    images = np.stack([s.image for s in chosen])[:, None].astype(np.float32)
    labels = np.stack([s.mask for s in chosen]).astype(np.int64)
    return images, labels


class _Prefetcher:
    """Background producer of (epoch, images, labels) batches through a bounded queue."""

    _DONE = object()

    def __init__(self, plan: Iterator[Tuple[int, np.ndarray]], samples: Sequence[Sample], depth: int):
        self._plan = plan
        self._samples = samples
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(depth, 1))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._fill, name="train-prefetch", daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _fill(self):
        try:
            for epoch, indices in self._plan:
                if not self._put((epoch,) + _stack(self._samples, indices)):
                    return
        except Exception as e:
            self._put(e)
            return
        self._put(self._DONE)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self):
        self._stop.set()
        self._thread.join()


def _batches(plan, samples: Sequence[Sample], depth: int):
    if depth == 0:
        for epoch, indices in plan:
            yield (epoch,) + _stack(samples, indices)
        return
    prefetcher = _Prefetcher(plan, samples, depth)
    try:
        yield from prefetcher
    finally:
        prefetcher.close()


def train(spec: NetworkSpec, init_store: WeightStore, dataset: Sequence[Sample], cfg: TrainConfig,
          dev: Optional[Sequence[Sample]] = None, progress: bool = False,
          report: Optional[TrainReport] = None) -> Tuple[WeightStore, TrainReport]:
    """
    Train a copy of `init_store` on `dataset`.

    ================================================

    inputs:
    spec: architecture (its class count must equal cfg.num_classes)
    init_store: starting weights, left untouched
    dataset: training samples; labels must lie in [0, K)
    dev: samples scored with mean foreground Dice per epoch (or every cfg.eval_every
         iterations) and after the last iteration

    outputs:
    store: trained weights
    report: per-iteration loss / lr / wall time plus the development Dice trace

    ================================================
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    if spec.num_classes != cfg.num_classes:
        raise ValueError(f"spec has {spec.num_classes} classes but the config asks for {cfg.num_classes}")
    top = max(int(s.mask.max()) for s in dataset)
    if top >= cfg.num_classes:
        raise ValueError(f"label {top} is out of range for {cfg.num_classes} classes")

    store = init_store.copy()
    model = FCNModel(spec, store)
    state = OptimizerState.for_store(store)
    shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng, dropout_rng = np.random.default_rng(shuffle_seq), np.random.default_rng(dropout_seq)

    max_iter = cfg.resolve_max_iter(len(dataset))
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    if report is None:
        report = TrainReport(max_iter=max_iter, base_lr=cfg.effective_base_lr)
    else:
        report.max_iter, report.base_lr = max_iter, cfg.effective_base_lr
    logger.info(f"Training on {len(dataset)} samples for {max_iter} iterations "
                f"(base_lr {cfg.effective_base_lr}, batch {cfg.batch_size}, seed {cfg.seed})")

    plan = _batch_plan(len(dataset), cfg.batch_size, max_iter, shuffle_rng)
    bar = tqdm(total=max_iter, desc="train", disable=not progress, leave=False)
    started = time.perf_counter()
    try:
        for index, (epoch, images, labels) in enumerate(_batches(plan, dataset, cfg.prefetch)):
            iteration = index + 1
            lr = poly_lr(cfg, index, max_iter)
            try:
                loss, grads = model.loss_and_gradients(images, labels, train=cfg.dropout, rng=dropout_rng)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(iteration, f"loss is {loss}")
                sgd_step(store, grads, state, lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
            except NonFiniteError as e:
                raise TrainingDivergedError(iteration, str(e)) from e

            report.records.append(IterationRecord(iteration, lr, loss, epoch,
                                                  (time.perf_counter() - started) * 1000.0))
            bar.update(1)
            bar.set_postfix(loss=f"{loss:.4f}", epoch=epoch)

            due = iteration % cfg.eval_every == 0 if cfg.eval_every else iteration % per_epoch == 0
            if dev and (due or iteration == max_iter):
                dice = evaluate_dice(model, dev)
                report.dev_dice.append((iteration, dice))
                logger.info(f"iter {iteration}/{max_iter} epoch {epoch}: loss {loss:.4f}, dev Dice {dice:.4f}")
    finally:
        bar.close()

    logger.info(f"Finished {max_iter} iterations in {time.perf_counter() - started:.1f}s, "
                f"final loss {report.records[-1].loss:.4f}")
    return store, report


def fine_tune(spec: NetworkSpec, source_path: str, dataset: Sequence[Sample], cfg: TrainConfig,
              dev: Optional[Sequence[Sample]] = None, progress: bool = False) -> Tuple[WeightStore, TrainReport]:
    """
    Transfer-learn from a saved model.

    Layers whose name and shapes match `spec` are transplanted from `source_path`;
    the rest are Xavier-initialized from cfg.seed. Training then runs with the
    fine-tuning base_lr (0.001) unless cfg.base_lr is set.
    """
    cfg = cfg.copy(update={"fine_tune": True})
    transplanted = load_weights(source_path, spec, strict=False)
    fresh = missing_layers(spec, transplanted)
    if len(transplanted) == 0:
        logger.warning(f"No layer of {source_path} matches the network; fine-tuning starts from random weights")
    initialized = init_xavier(spec, cfg.seed, layers=fresh)

    store = WeightStore()
    for name in (layer.name for layer in spec.layers if layer.has_params):
        store.set(name, transplanted[name] if name in transplanted else initialized[name])

    report = TrainReport(max_iter=0, base_lr=cfg.effective_base_lr, transplanted=list(transplanted))
    return train(spec, store, dataset, cfg, dev=dev, progress=progress, report=report)

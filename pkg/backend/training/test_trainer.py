import csv
import logging
import math
from unittest import mock

import numpy as np
import pytest
from pydantic import ValidationError

from backend.data_pipeline.augmentation import Sample
from backend.phantom.generator import PhantomSpec, generate
from backend.training.trainer import (REPORT_COLUMNS, TrainConfig, TrainingDivergedError, TrainReport, evaluate_dice,
                                      fine_tune, poly_lr, train, write_report_csv)
from fcn.model import FCNModel
from fcn.network_spec import default_spec, parse_spec
from fcn.weights import init_xavier, save_weights

TINY_ARCH = """
conv1   conv        out=4 kernel=3 pad=1
relu1   relu
score   score-conv
prob    softmax
"""


@pytest.fixture
def tiny_spec():
    return parse_spec(TINY_ARCH)


def _samples(count=3, size=32, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        image = rng.normal(size=(size, size)).astype(np.float32)
        mask = (image > 0.5).astype(np.uint8)
        samples.append(Sample(sample_id=f"s{i}", image=image, mask=mask))
    return samples


def _zero_gradients(self, images, labels, train=True, rng=None):
    return 1.0, {name: [np.zeros_like(a) for a in arrays] for name, arrays in self.store.items()}


def test_poly_lr_values():
    cfg = TrainConfig(max_iter=100)
    assert poly_lr(cfg, 0) == pytest.approx(0.01, abs=1e-12)
    assert poly_lr(cfg, 50) == pytest.approx(0.01 * math.sqrt(0.5), abs=1e-12)
    assert poly_lr(cfg, 50) == pytest.approx(0.0070710678, abs=1e-10)
    assert poly_lr(cfg, 100) == 0.0


def test_poly_lr_is_strictly_decreasing():
    cfg = TrainConfig(max_iter=40, power=0.9)
    rates = [poly_lr(cfg, i) for i in range(41)]
    assert all(a > b for a, b in zip(rates, rates[1:]))


def test_poly_lr_rejects_iterations_past_the_end():
    with pytest.raises(ValueError):
        poly_lr(TrainConfig(max_iter=10), 11)
    with pytest.raises(ValueError):
        poly_lr(TrainConfig(), 0)


def test_base_lr_defaults():
    assert TrainConfig().effective_base_lr == 0.01
    assert TrainConfig(fine_tune=True).effective_base_lr == 0.001
    assert TrainConfig(fine_tune=True, base_lr=0.05).effective_base_lr == 0.05


def test_max_iter_counts_augmented_samples():
    assert TrainConfig().resolve_max_iter(180) == 1800
    assert TrainConfig(batch_size=4, epochs=1).resolve_max_iter(10) == 3
    assert TrainConfig(max_iter=7).resolve_max_iter(180) == 7


@pytest.mark.parametrize("field, value", [("base_lr", 0.0), ("momentum", 1.0), ("weight_decay", -1.0),
                                          ("power", 0.0), ("batch_size", 0), ("num_classes", 1)])
def test_config_validation(field, value):
    with pytest.raises(ValidationError):
        TrainConfig(**{field: value})


def test_learning_rate_trace_matches_schedule(tiny_spec):
    cfg = TrainConfig(max_iter=12, prefetch=2)
    _, report = train(tiny_spec, init_xavier(tiny_spec, seed=0), _samples(), cfg)
    assert len(report.records) == 12
    assert [r.iteration for r in report.records] == list(range(1, 13))
    for i, lr in enumerate(report.learning_rates):
        assert abs(lr - poly_lr(cfg, i, 12)) < 1e-12
    assert [r.epoch for r in report.records] == [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]


def test_training_is_deterministic(tiny_spec):
    init = init_xavier(tiny_spec, seed=3)
    cfg = TrainConfig(max_iter=9, seed=7)
    first, _ = train(tiny_spec, init, _samples(), cfg)
    second, _ = train(tiny_spec, init, _samples(), cfg)
    synchronous, _ = train(tiny_spec, init, _samples(), cfg.copy(update={"prefetch": 0}))
    assert first.equals(second)
    assert first.equals(synchronous)
    assert not first.equals(init)


def test_initial_store_is_not_modified(tiny_spec):
    init = init_xavier(tiny_spec, seed=3)
    before = init.copy()
    train(tiny_spec, init, _samples(), TrainConfig(max_iter=3))
    assert init.equals(before)


def test_zero_gradients_without_decay_leave_weights_unchanged(tiny_spec):
    init = init_xavier(tiny_spec, seed=1)
    with mock.patch.object(FCNModel, "loss_and_gradients", _zero_gradients):
        store, _ = train(tiny_spec, init, _samples(), TrainConfig(max_iter=20, weight_decay=0.0))
    assert store.equals(init)


def test_weight_decay_spares_biases(tiny_spec):
    init = init_xavier(tiny_spec, seed=1)
    for name in init:
        init[name][1][:] = 0.5
    with mock.patch.object(FCNModel, "loss_and_gradients", _zero_gradients):
        store, _ = train(tiny_spec, init, _samples(), TrainConfig(max_iter=20, weight_decay=0.1, base_lr=0.5,
                                                                      momentum=0.0))
    for name in init:
        w0, w1 = init[name][0], store[name][0]
        assert np.all(np.abs(w1) < np.abs(w0) + 1e-12)
        assert np.all(np.sign(w1) == np.sign(w0))
        assert np.all(store[name][1] == 0.5)


def test_non_finite_loss_aborts_with_iteration(tiny_spec):
    calls = {"n": 0}

    def diverging(self, images, labels, train=True, rng=None):
        calls["n"] += 1
        loss, grads = _zero_gradients(self, images, labels)
        return (float("nan") if calls["n"] == 3 else loss), grads

    with mock.patch.object(FCNModel, "loss_and_gradients", diverging):
        with pytest.raises(TrainingDivergedError) as info:
            train(tiny_spec, init_xavier(tiny_spec, seed=0), _samples(), TrainConfig(max_iter=10))
    assert info.value.iteration == 3
    assert "iteration 3" in str(info.value)


def test_exploding_learning_rate_reports_the_iteration(tiny_spec):
    sample = _samples(1)[0]
    loud = [Sample(sample_id="loud", image=sample.image * 1000.0, mask=sample.mask)]
    cfg = TrainConfig(max_iter=20, base_lr=1e30, prefetch=0)
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_spec, init_xavier(tiny_spec, seed=0), loud, cfg)
    assert 1 <= info.value.iteration <= 20
    assert f"iteration {info.value.iteration}" in str(info.value)


def test_rejects_bad_datasets(tiny_spec):
    store = init_xavier(tiny_spec, seed=0)
    with pytest.raises(ValueError, match="empty"):
        train(tiny_spec, store, [], TrainConfig(max_iter=1))
    bad = _samples(1)
    bad[0].mask[0, 0] = 2
    with pytest.raises(ValueError, match="out of range"):
        train(tiny_spec, store, bad, TrainConfig(max_iter=1))
    mixed = _samples(1, size=32) + _samples(1, size=40)
    with pytest.raises(ValueError, match="equally sized"):
        train(tiny_spec, store, mixed, TrainConfig(max_iter=2, batch_size=2, prefetch=0))


def test_dev_dice_is_tracked(tiny_spec):
    cfg = TrainConfig(max_iter=6)
    store, report = train(tiny_spec, init_xavier(tiny_spec, seed=0), _samples(), cfg, dev=_samples(2, seed=9))
    assert [iteration for iteration, _ in report.dev_dice] == [3, 6]
    assert report.final_dice == pytest.approx(evaluate_dice(FCNModel(tiny_spec, store), _samples(2, seed=9)))


def test_iterations_to_reach():
    report = TrainReport(max_iter=30, base_lr=0.01, dev_dice=[(10, 0.5), (20, 0.85), (30, 0.9)])
    assert report.iterations_to_reach(0.8) == 20
    assert report.iterations_to_reach(0.95) is None


def test_report_csv(tiny_spec, tmp_path):
    _, report = train(tiny_spec, init_xavier(tiny_spec, seed=0), _samples(), TrainConfig(max_iter=4))
    path = tmp_path / "report.csv"
    write_report_csv(report, str(path))
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
    assert float(rows[1][1]) == 0.01


def test_fine_tune_transplants_matching_layers(tmp_path):
    source_spec = default_spec(num_classes=2)
    source = init_xavier(source_spec, seed=5)
    path = str(tmp_path / "source.fcnw")
    save_weights(source, path)

    target_spec = default_spec(num_classes=3)
    captured = {}

    def fake_train(spec, store, dataset, cfg, dev=None, progress=False, report=None):
        captured["store"], captured["cfg"] = store, cfg
        return store, report

    with mock.patch("backend.training.trainer.train", side_effect=fake_train):
        _, report = fine_tune(target_spec, path, _samples(1), TrainConfig(num_classes=3))

    store = captured["store"]
    assert captured["cfg"].effective_base_lr == 0.001
    assert len(report.transplanted) == 12
    for name in report.transplanted:
        assert all(a.tobytes() == b.tobytes() for a, b in zip(store[name], source[name]))
    assert store["score5"][0].shape[0] == 3


def test_fine_tune_warns_when_nothing_transfers(tmp_path, tiny_spec, caplog):
    path = str(tmp_path / "tiny.fcnw")
    save_weights(init_xavier(tiny_spec, seed=0), path)
    with mock.patch("backend.training.trainer.train", side_effect=lambda spec, store, *a, **k: (store, k["report"])):
        with caplog.at_level(logging.WARNING, logger="cardiac_fcn.trainer"):
            _, report = fine_tune(default_spec(), path, _samples(1), TrainConfig())
    assert report.transplanted == []
    assert "random weights" in caplog.text


@pytest.mark.slow
def test_overfits_a_single_phantom():
    spec = default_spec()
    sample = generate(PhantomSpec(count=1, size=64, seed=11))[0].sample("endo")
    cfg = TrainConfig(max_iter=300, seed=0)
    store, report = train(spec, init_xavier(spec, seed=0), [sample], cfg)
    assert evaluate_dice(FCNModel(spec, store), [sample]) >= 0.95
    assert report.losses[-1] <= report.losses[0] / 10


@pytest.mark.slow
def test_fine_tuning_reaches_target_no_later_than_xavier(tmp_path):
    spec = default_spec()
    source = [c.sample("endo") for c in generate(PhantomSpec(count=8, family="A", seed=1))]
    pretrained, _ = train(spec, init_xavier(spec, seed=0), source, TrainConfig(max_iter=300))
    path = str(tmp_path / "family_a.fcnw")
    save_weights(pretrained, path)

    target = [c.sample("endo") for c in generate(PhantomSpec(count=8, family="B", seed=2))]
    dev = target[:4]
    budget = 300

    def reach(report):
        hit = report.iterations_to_reach(0.8)
        return hit if hit is not None else math.inf

    tuned, scratch = [], []
    for seed in range(3):
        cfg = TrainConfig(max_iter=budget, seed=seed, eval_every=20)
        tuned.append(reach(fine_tune(spec, path, target, cfg, dev=dev)[1]))
        scratch.append(reach(train(spec, init_xavier(spec, seed=seed), target, cfg, dev=dev)[1]))
    assert np.median(tuned) <= np.median(scratch)

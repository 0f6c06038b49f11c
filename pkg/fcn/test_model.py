import numpy as np
import pytest

from autodiff import ops
from autodiff.gradcheck import relative_error
from autodiff.tensor import ShapeError, Tensor
from fcn.model import FCNModel, forward
from fcn.network_spec import default_spec
from fcn.weights import SpecMismatchError, init_xavier


@pytest.fixture(scope="module")
def spec():
    return default_spec()


@pytest.fixture(scope="module")
def model(spec):
    return FCNModel(spec, init_xavier(spec, seed=0))


def _image(size, seed=0):
    return np.random.default_rng(seed).standard_normal((1, 1, size, size)).astype(np.float32)


@pytest.mark.parametrize("size", [64, 100, 129, 200, 256])
def test_heatmap_matches_input_size(model, size):
    heatmap = forward(model.spec, model.store, _image(size))
    assert heatmap.shape == (1, 2, size, size)


def test_heatmap_is_a_distribution(model):
    heatmap = model.predict_proba(_image(100)).astype(np.float64)
    assert (heatmap >= 0).all()
    np.testing.assert_allclose(heatmap.sum(axis=1), 1.0, atol=1e-5)


def test_non_square_input(model):
    image = np.random.default_rng(1).standard_normal((1, 1, 48, 80))
    assert model.predict_labels(image).shape == (1, 48, 80)


def test_zero_score_layers_give_uniform_heatmap(spec):
    store = init_xavier(spec, seed=0)
    for layer in spec.layers:
        if layer.kind == "score-conv":
            for blob in store[layer.name]:
                blob[...] = 0
    heatmap = forward(spec, store, _image(64))
    np.testing.assert_array_equal(heatmap.data, np.full((1, 2, 64, 64), 0.5, dtype=np.float32))


def test_forward_is_deterministic(model):
    image = _image(64, seed=3)
    first = model.predict_proba(image)
    second = model.predict_proba(image)
    assert first.tobytes() == second.tobytes()


def test_forward_rejects_small_input(model):
    with pytest.raises(ShapeError):
        forward(model.spec, model.store, _image(31))


def test_forward_rejects_wrong_channel_count(model):
    with pytest.raises(ShapeError):
        model.predict_proba(np.zeros((1, 3, 64, 64)))


def test_model_rejects_mismatched_store(spec):
    with pytest.raises(SpecMismatchError):
        FCNModel(default_spec(num_classes=3), init_xavier(spec, seed=0))


def test_training_graph_runs_on_small_input(model):
    logits = model.forward_logits(_image(16))
    assert logits.shape == (1, 2, 16, 16)


def test_dropout_changes_training_logits_only(model):
    image = _image(32)
    eval_logits = model.forward_logits(image).data
    train_logits = model.forward_logits(image, train=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(eval_logits, train_logits)
    np.testing.assert_array_equal(model.forward_logits(image).data, eval_logits)


def test_gradients_cover_every_blob(model):
    labels = np.zeros((1, 32, 32), dtype=np.int64)
    labels[:, 8:24, 8:24] = 1
    loss, grads = model.loss_and_gradients(_image(32), labels, train=True, rng=np.random.default_rng(0))
    assert np.isfinite(loss) and loss > 0
    assert list(grads) == list(model.store)
    for name, arrays in grads.items():
        assert [g.shape for g in arrays] == [a.shape for a in model.store[name]]


def test_end_to_end_gradients_match_finite_differences(float64, spec):
    store = init_xavier(spec, seed=4).astype(np.float64)
    model = FCNModel(spec, store)
    rng = np.random.default_rng(9)
    image = rng.standard_normal((1, 1, 16, 16))
    labels = (rng.random((1, 16, 16)) > 0.5).astype(np.int64)

    _, grads = model.loss_and_gradients(image, labels, train=False)

    def loss_value():
        logits = model.forward_logits(Tensor(image))
        return ops.softmax_xent_pixelwise(logits, labels)[0].item()

    blobs = [(name, i) for name, arrays in store.items() for i in range(len(arrays))]
    sizes = np.array([store[name][i].size for name, i in blobs])
    picks = rng.choice(sizes.sum(), size=200, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    h = 1e-5
    analytic, numeric = [], []
    for flat in picks:
        b = np.searchsorted(offsets, flat, side="right") - 1
        name, i = blobs[b]
        array = store[name][i].reshape(-1)
        j = flat - offsets[b]
        original = array[j]
        array[j] = original + h
        plus = loss_value()
        array[j] = original - h
        minus = loss_value()
        array[j] = original
        numeric.append((plus - minus) / (2 * h))
        analytic.append(grads[name][i].reshape(-1)[j])

    assert relative_error(np.array(analytic), np.array(numeric)) < 1e-3

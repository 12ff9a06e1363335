import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from ceval.attacks import bounded_iga
from ceval.datasets import Dataset, make_gaussian_blobs
from ceval.models import (AdversarialConfig, AffineClassifier, ConvNetClassifier,
                          MLPClassifier, ModelFormatError, ModelVersionError, TrainConfig,
                          accuracy, load_model, loss_component, make_classifier, predict,
                          save_model, train, train_adversarial)
from conftest import affine, requires_mnist


def test_predict_affine_identity():
    model = affine(np.eye(2), np.zeros(2))
    logits, label = predict(model, np.array([0.9, 0.1]))
    np.testing.assert_array_equal(logits, [0.9, 0.1])
    assert label == 0


def test_predict_tie_goes_to_lowest_index():
    model = affine(np.zeros((3, 2)), [2.0, 2.0, 1.0])
    assert predict(model, np.array([0.5, 0.5]))[1] == 0


def test_predict_rejects_bad_inputs():
    model = affine(np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        predict(model, np.array([0.1, 0.2, 0.3]))
    with pytest.raises(ValueError):
        predict(model, np.array([1.5, 0.0]))


def test_loss_component_uniform_logits():
    model = affine(np.zeros((10, 4)), np.zeros(10))
    J, grad = loss_component(model, np.full(4, 0.5), 3)
    assert J == pytest.approx(math.log(10), abs=1e-12)
    assert grad.shape == (4,)


def test_loss_component_rejects_label_out_of_range():
    model = affine(np.zeros((10, 4)), np.zeros(10))
    with pytest.raises(ValueError):
        loss_component(model, np.full(4, 0.5), 10)


@pytest.mark.parametrize("model", [
    MLPClassifier(hidden_layer_sizes=(7,), input_shape=(5,), num_classes=3),
    ConvNetClassifier(input_shape=(1, 28, 28), num_classes=4),
], ids=["mlp", "lenet"])
def test_loss_gradient_matches_central_differences(model):
    rng = np.random.default_rng(3)
    model.initialize(seed=1)
    x = rng.uniform(0.2, 0.8, size=model.input_shape)
    _, grad = loss_component(model, x, 1)
    idx = rng.choice(x.size, size=min(20, x.size), replace=False)
    h = 1e-5
    for i in idx:
        e = np.zeros(x.size)
        e[i] = h
        up = loss_component(model, x + e.reshape(x.shape), 1)[0]
        down = loss_component(model, x - e.reshape(x.shape), 1)[0]
        fd = (up - down) / (2 * h)
        assert abs(grad.reshape(-1)[i] - fd) <= 1e-6 + 1e-4 * abs(fd)


def _separable_2d(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, size=(n, 2))
    margin = X[:, 0] - X[:, 1]
    keep = np.abs(margin) > 0.1
    return Dataset(X[keep], (margin[keep] > 0).astype(int), num_classes=2)


def test_affine_reaches_perfect_train_accuracy():
    data = _separable_2d()
    model = AffineClassifier(input_shape=(2,), num_classes=2)
    train(model, data, TrainConfig(lr=0.05, epochs=50, batch_size=16))
    assert accuracy(model, data) == 1.0


def test_training_is_reproducible():
    data = make_gaussian_blobs(6, 3, 30, 4.0, seed=2)
    runs = []
    for _ in range(2):
        model = MLPClassifier(hidden_layer_sizes=(5,), input_shape=(6,), num_classes=3)
        train(model, data, TrainConfig(epochs=3, batch_size=8, seed=11))
        runs.append(model.weight_bytes())
    assert runs[0] == runs[1]


def test_history_records_each_epoch():
    data = make_gaussian_blobs(6, 2, 20, 4.0)
    model = train(AffineClassifier(input_shape=(6,), num_classes=2), data,
                  TrainConfig(epochs=4, batch_size=8))
    assert [h["epoch"] for h in model.history_] == [1, 2, 3, 4]
    assert all(math.isfinite(h["loss"]) for h in model.history_)


def test_invalid_configs():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        AdversarialConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        train_adversarial(AffineClassifier(input_shape=(2,), num_classes=2),
                          _separable_2d(), TrainConfig())


def test_adversarial_training_runs_with_finite_history():
    data = make_gaussian_blobs(8, 2, 40, 4.0)
    model = MLPClassifier(hidden_layer_sizes=(6,), input_shape=(8,), num_classes=2)
    train_adversarial(model, data, TrainConfig(epochs=2, batch_size=16,
                                               adversarial=AdversarialConfig(0.5)))
    assert all(math.isfinite(h["loss"]) for h in model.history_)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.6), st.integers(0, 1000))
def test_bounded_iga_respects_normalized_bound(eps, seed):
    rng = np.random.default_rng(seed)
    model = MLPClassifier(hidden_layer_sizes=(5,), input_shape=(12,), num_classes=3)
    model.initialize(seed)
    X = rng.uniform(0, 1, size=(4, 12))
    adv = bounded_iga(model, X, rng.integers(0, 3, size=4), eps)
    norms = np.linalg.norm((adv - X).reshape(4, -1), axis=1) / math.sqrt(12)
    assert np.all(norms <= eps * (1 + 1e-12))
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_bounded_iga_increases_loss():
    data = make_gaussian_blobs(10, 2, 50, 6.0)
    model = train(AffineClassifier(input_shape=(10,), num_classes=2), data,
                  TrainConfig(epochs=5, batch_size=16, lr=0.05))
    X, y = data.images[:20], data.labels[:20]
    adv = bounded_iga(model, X, y, 0.1)
    assert model.loss_gradient(adv, y)[0].mean() > model.loss_gradient(X, y)[0].mean()


# ---------------------------------------------------------------- persistence
@pytest.mark.parametrize("arch", ["affine", "mlp", "lenet"])
def test_save_load_roundtrip_is_bitwise(tmp_path, arch):
    shape = (1, 28, 28) if arch == "lenet" else (9,)
    model = make_classifier(arch, shape, 4, hidden=(6, 5)).initialize(seed=3)
    path = tmp_path / "m.json"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.weight_bytes() == model.weight_bytes()
    x = np.random.default_rng(0).uniform(size=(3,) + shape)
    assert loaded.decision_function(x).tobytes() == model.decision_function(x).tobytes()


def test_model_file_schema(tmp_path):
    model = affine([[1.0, 2.0], [3.0, 4.0]], [0.5, -0.5])
    save_model(model, tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["format_version"] == 1 and doc["architecture"] == "affine"
    assert doc["input_shape"] == [2] and doc["num_classes"] == 2
    assert {"name", "shape", "data"} <= set(doc["layers"][0])


def test_truncated_model_file(tmp_path):
    save_model(affine(np.eye(2), np.zeros(2)), tmp_path / "m.json")
    raw = (tmp_path / "m.json").read_bytes()
    (tmp_path / "t.json").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ModelFormatError, match="byte"):
        load_model(tmp_path / "t.json")


def test_wrong_version(tmp_path):
    save_model(affine(np.eye(2), np.zeros(2)), tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["format_version"] = 2
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(ModelVersionError):
        load_model(tmp_path / "v.json")


def test_missing_field_is_named(tmp_path):
    save_model(affine(np.eye(2), np.zeros(2)), tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    del doc["layers"][0]["shape"]
    (tmp_path / "f.json").write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError, match="shape"):
        load_model(tmp_path / "f.json")


# ------------------------------------------------------------ estimator API
def test_estimator_api_fit_predict_clone():
    data = make_gaussian_blobs(5, 3, 40, 6.0)
    X = data.images.reshape(len(data), -1)
    est = MLPClassifier(hidden_layer_sizes=(8,), config=TrainConfig(epochs=20, batch_size=16))
    assert est.get_params()["hidden_layer_sizes"] == (8,)
    est.fit(X, data.labels)
    assert est.score(X, data.labels) > 0.9
    twin = clone(est)
    assert not hasattr(twin, "weights_")
    assert twin.get_params()["config"] == est.get_params()["config"]


@requires_mnist
def test_mnist_mlp_accuracy(mnist_mlp, mnist_test):
    assert accuracy(mnist_mlp, mnist_test) >= 0.95

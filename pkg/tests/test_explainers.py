import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import spearmanr
from sklearn.metrics import r2_score

from ceval.explainers import (Explanation, ImportanceMap, SegmentMap, aggregate_to_segments,
                              budget, explain_dummy, explain_grad_times_input, explain_gradient,
                              explain_integrated_gradients, explain_lime, grid_segment,
                              lime_perturb, parse_explainer, read_importance_csv, top_k,
                              top_segments_within, write_explanation_json, write_importance_csv)
from ceval.models import MLPClassifier
from conftest import affine, requires_mnist

weights_strategy = arrays(np.float64, st.integers(1, 40),
                          elements=st.floats(0, 1e6, allow_nan=False, allow_infinity=False))


# -------------------------------------------------------------- gradients
def test_gradient_of_affine_is_abs_row():
    model = affine([[2.0, -3.0], [0.0, 0.0]], [0.0, 0.0])
    imp = explain_gradient(model, np.array([0.9, 0.1]))
    np.testing.assert_array_equal(imp.weights, [2.0, 3.0])


def test_gradient_of_constant_model_is_zero():
    imp = explain_gradient(affine(np.zeros((3, 4)), np.zeros(3)), np.full(4, 0.5))
    np.testing.assert_array_equal(imp.weights, np.zeros(4))


def test_grad_times_input_definition():
    # x = (1, 2) lies outside the unit box, so scale to (0.25, 0.5) with gradient (12, 16)
    model = affine([[12.0, 16.0], [0.0, 0.0]], [1.0, 0.0])
    imp = explain_grad_times_input(model, np.array([0.25, 0.5]))
    np.testing.assert_array_equal(imp.weights, [3.0, 8.0])
    zero = explain_grad_times_input(model, np.zeros(2))
    np.testing.assert_array_equal(zero.weights, [0.0, 0.0])


def test_grad_times_input_ranks_like_gradient_on_constant_input(rng):
    model = MLPClassifier(hidden_layer_sizes=(9,), input_shape=(12,), num_classes=3).initialize(2)
    x = np.full(12, 0.7)
    a, b = explain_gradient(model, x), explain_grad_times_input(model, x)
    assert top_k(a, 12).feature_indices.tolist() == top_k(b, 12).feature_indices.tolist()


def test_ig_completeness_is_exact_for_affine(rng):
    model = affine(rng.normal(size=(3, 6)), rng.normal(size=3))
    x, base = rng.uniform(size=6), rng.uniform(size=6)
    imp = explain_integrated_gradients(model, x, baseline=base, steps=3)
    z, zb = model.decision_function(x)[0], model.decision_function(base)[0]
    label = imp.params["label"]
    assert imp.params["signed"].sum() == pytest.approx(z[label] - zb[label], abs=1e-12)


def test_ig_completeness_for_mlp_at_200_steps(rng):
    model = MLPClassifier(hidden_layer_sizes=(16,), input_shape=(10,), num_classes=3).initialize(5)
    for _ in range(5):
        x = rng.uniform(size=10)
        imp = explain_integrated_gradients(model, x, steps=200)
        label = imp.params["label"]
        gap = model.decision_function(x)[0][label] - model.decision_function(np.zeros(10))[0][label]
        assert abs(imp.params["signed"].sum() - gap) < 1e-2 * abs(model.decision_function(x)[0][label])


def test_ig_rejects_bad_arguments():
    model = affine(np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        explain_integrated_gradients(model, np.ones(2), steps=0)
    with pytest.raises(ValueError):
        explain_integrated_gradients(model, np.ones(2), baseline=np.ones(3))


@requires_mnist
def test_mnist_explainers(mnist_mlp, mnist_test):
    x = mnist_test.images[0]
    imp = explain_gradient(mnist_mlp, x)
    assert imp.shape == (1, 28, 28) and np.all(np.isfinite(imp.weights))
    rhos = []
    for x in mnist_test.images[:10]:
        a = explain_integrated_gradients(mnist_mlp, x, steps=5).weights.reshape(-1)
        b = explain_integrated_gradients(mnist_mlp, x, steps=10).weights.reshape(-1)
        rhos.append(spearmanr(a, b).statistic)
    assert min(rhos) > 0.9


# ------------------------------------------------------------------- LIME
def _segment3_model():
    # 4x4 image, 2x2 grid: class 0 logit grows only with segment 3 (bottom-right)
    seg = grid_segment((4, 4), (2, 2))
    W = np.zeros((2, 16))
    W[0, seg.members(3)] = 3.0
    return affine(W, [0.0, 2.0], shape=(4, 4)), seg


def test_lime_finds_the_only_relevant_segment():
    model, seg = _segment3_model()
    x = np.full((4, 4), 0.9)
    imp = explain_lime(model, x, seg, num_samples=200, seed=1)
    assert int(np.argmax(imp.params["coef"])) == 3
    assert np.argmax(np.abs(imp.params["coef"])) == 3


def test_lime_is_reproducible_and_prefix_consistent():
    model, seg = _segment3_model()
    x = np.full((4, 4), 0.9)
    a = explain_lime(model, x, seg, num_samples=50, seed=4)
    b = explain_lime(model, x, seg, num_samples=50, seed=4)
    np.testing.assert_array_equal(a.weights, b.weights)
    rng = np.random.default_rng(4)
    first = rng.random((50, 4)) < 0.5
    longer = np.random.default_rng(4).random((100, 4)) < 0.5
    np.testing.assert_array_equal(first, longer[:50])


def test_lime_heldout_r2_grows_with_samples():
    model = MLPClassifier(hidden_layer_sizes=(12,), input_shape=(1, 8, 8),
                          num_classes=3).initialize(11)
    seg = grid_segment((1, 8, 8), (4, 4))
    x = np.random.default_rng(0).uniform(size=(1, 8, 8))
    held = np.random.default_rng(99).random((400, 16)) < 0.5
    label = int(model.predict(x[None])[0])
    truth = model.predict_proba(lime_perturb(x, seg, held))[:, label]
    for seed in range(4):
        scores = []
        for n in (25, 50, 100, 200, 400):
            imp = explain_lime(model, x, seg, num_samples=n, seed=seed)
            scores.append(r2_score(truth, held @ imp.params["coef"] + imp.params["intercept"]))
        # once the linear surrogate saturates, doublings move R^2 by sampling noise only
        assert all(b >= a - 1e-3 for a, b in zip(scores, scores[1:])), scores
        assert scores[-1] > scores[0] + 0.03


def test_lime_rejects_too_few_samples():
    model, seg = _segment3_model()
    with pytest.raises(ValueError):
        explain_lime(model, np.full((4, 4), 0.9), seg, num_samples=3)


def test_lime_perturb_fills_switched_off_segments():
    seg = grid_segment((4, 4), (2, 2))
    x = np.ones((4, 4))
    out = lime_perturb(x, seg, np.array([[True, False, True, True]]))
    assert np.all(out[0].reshape(-1)[seg.members(1)] == 0.5)
    assert np.all(out[0].reshape(-1)[seg.members(0)] == 1.0)


# ------------------------------------------------------------------ dummy
def test_center_square_dummy_on_mnist_shape():
    imp = explain_dummy((1, 28, 28), "center_square")
    exp = top_k(imp, budget(784))
    rows, cols = np.unravel_index(exp.feature_indices, (28, 28))
    # 9x9 is the smallest centred square holding 79 pixels
    assert rows.min() >= 9 and rows.max() <= 18 and cols.min() >= 9 and cols.max() <= 18
    assert imp.weights.sum() == 81


def test_random_dummy_is_seeded():
    a = explain_dummy((28, 28), "random", seed=3)
    b = explain_dummy((28, 28), "random", seed=3)
    assert top_k(a, 79).feature_indices.tolist() == top_k(b, 79).feature_indices.tolist()
    assert not np.array_equal(a.weights, explain_dummy((28, 28), "random", seed=4).weights)


def test_border_dummy_avoids_center():
    border = explain_dummy((28, 28), "border").weights
    center = explain_dummy((28, 28), "center_square").weights
    assert not np.any((border > 0) & (center > 0))
    assert border.sum() >= 79


def test_unknown_dummy_kind():
    with pytest.raises(ValueError):
        explain_dummy((4, 4), "stripes")


# ------------------------------------------------------------ selection
def test_top_k_examples():
    imp = ImportanceMap([0.1, 0.9, 0.5])
    assert top_k(imp, 2).feature_indices.tolist() == [1, 2]
    assert top_k(ImportanceMap([0.3, 0.3, 0.3]), 2).feature_indices.tolist() == [0, 1]
    assert top_k(imp, 0).k == 0
    with pytest.raises(ValueError):
        top_k(imp, 4)


def test_budget_is_ceil_of_fraction():
    assert budget(784) == 79 and budget(780) == 78 and budget(10) == 1


@settings(max_examples=200, deadline=None)
@given(weights_strategy, st.data())
def test_top_k_prefixes_are_nested(w, data):
    imp = ImportanceMap(w)
    k = data.draw(st.integers(0, w.size - 1))
    small, big = top_k(imp, k), top_k(imp, k + 1)
    assert set(small.feature_indices) <= set(big.feature_indices)
    assert big.feature_indices[:k].tolist() == small.feature_indices.tolist()


@settings(max_examples=200, deadline=None)
@given(weights_strategy, st.floats(1e-3, 1e3), st.data())
def test_top_k_invariant_to_positive_scaling(w, scale, data):
    k = data.draw(st.integers(0, w.size))
    a = top_k(ImportanceMap(w), k)
    b = top_k(ImportanceMap(w * scale), k)
    # rounding can merge or split near-equal floats; only compare when the order survives
    if np.array_equal(np.argsort(-w, kind="stable"), np.argsort(-w * scale, kind="stable")):
        assert a.feature_indices.tolist() == b.feature_indices.tolist()


@settings(max_examples=100, deadline=None)
@given(weights_strategy, st.data())
def test_explanations_satisfy_invariants(w, data):
    k = data.draw(st.integers(0, w.size))
    exp = top_k(ImportanceMap(w), k)
    idx = exp.feature_indices
    assert exp.k == k and len(set(idx.tolist())) == k
    assert np.all((idx >= 0) & (idx < w.size))
    assert np.all(np.diff(w[idx]) <= 0)


def test_explanation_rejects_bad_indices():
    with pytest.raises(ValueError):
        Explanation([0, 0], 3)
    with pytest.raises(ValueError):
        Explanation([5], 3)


def test_aggregate_examples():
    seg = SegmentMap([0, 0, 1, 1], 2)
    exp = aggregate_to_segments(ImportanceMap([0.5, 0.5, 1.0, 1.0]), seg, 1)
    assert sorted(exp.feature_indices.tolist()) == [2, 3] and exp.granularity == "segment"
    exp = aggregate_to_segments(ImportanceMap(np.ones(4)), seg, 1)
    assert sorted(exp.feature_indices.tolist()) == [0, 1]
    with pytest.raises(ValueError):
        aggregate_to_segments(ImportanceMap(np.ones(4)), seg, 3)


def test_aggregate_grid_count():
    seg = grid_segment((28, 28), (4, 4))
    exp = aggregate_to_segments(explain_dummy((28, 28), "random"), seg, 3)
    assert exp.k == 3 * 49


def test_top_segments_within_budget():
    seg = grid_segment((28, 28), (7, 7))
    exp = top_segments_within(explain_dummy((28, 28), "random", seed=2), seg, 79)
    assert exp.k == 64 and exp.metadata == {"segments": exp.metadata["segments"],
                                            "requested": 79, "achieved": 64}


# -------------------------------------------------------------------- grid
def test_grid_examples():
    assert grid_segment((28, 28), (10, 10)).num_segments == 100
    one = grid_segment((28, 28), (1, 1))
    assert one.num_segments == 1 and np.all(one.assignment == 0)
    four = grid_segment((1, 28, 28), (4, 4))
    assert four.sizes().tolist() == [49] * 16
    assert four.assignment[0, 6, 6] == 0 and four.assignment[0, 7, 7] == 5
    with pytest.raises(ValueError):
        grid_segment((4, 4), (5, 1))


def test_grid_remainder_goes_to_last_tile():
    seg = grid_segment((28, 28), (10, 10))
    sizes = seg.sizes().reshape(10, 10)
    assert sizes[0, 0] == 4 and sizes[9, 9] == 100 and sizes.sum() == 784


# ------------------------------------------------------------------ parser
def test_parse_explainer_forms():
    assert [s.name for s in parse_explainer("lime:samples=50,200,1000")] == \
        ["lime:50", "lime:200", "lime:1000"]
    assert parse_explainer("lime:samples=50;grid=10x10")[0].grid == (10, 10)
    assert parse_explainer("ig:5")[0].steps == 5
    assert parse_explainer("ig")[0].name == "ig:10"
    assert parse_explainer("grad")[0].kind == "gradient"
    assert parse_explainer("dummy-border")[0].kind == "dummy-border"
    for bad in ("shap", "ig:0", "lime:foo=1", "lime:grid=3"):
        with pytest.raises(ValueError):
            parse_explainer(bad)


def test_spec_explanation_uses_segments_for_lime():
    model, _ = _segment3_model()
    spec = parse_explainer("lime:samples=50;grid=2x2")[0]
    exp = spec.explanation(model, np.full((4, 4), 0.9), k=4)
    assert exp.granularity == "segment" and exp.k == 4


# ------------------------------------------------------------------ export
def test_importance_csv_roundtrip(tmp_path, rng):
    imp = ImportanceMap(rng.random((3, 4)), "gradient")
    write_importance_csv(imp, tmp_path / "w.csv")
    assert (tmp_path / "w.csv").read_text().splitlines()[0] == "feature_index,weight"
    back = read_importance_csv(tmp_path / "w.csv", shape=(3, 4))
    np.testing.assert_array_equal(back.weights, imp.weights)


def test_explanation_json(tmp_path):
    exp = top_k(ImportanceMap([0.1, 0.9, 0.5], "gradient"), 2)
    write_explanation_json(exp, tmp_path / "e.json")
    assert json.loads((tmp_path / "e.json").read_text()) == {
        "k": 2, "indices": [1, 2], "source": "gradient", "granularity": "pixel"}


def test_dummy_and_grid_on_flat_inputs():
    assert explain_dummy((10,), "center_square").weights.shape == (10,)
    assert explain_dummy((10,), "border").weights.shape == (10,)
    seg = grid_segment((10,), (1, 5))
    assert seg.assignment.tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]

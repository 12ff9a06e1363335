import csv
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from ceval.attacks import AttackConfig, EpsSchedule, Mask, attack_iga
from ceval.datasets import make_gaussian_blobs
from ceval.explainers import (Explanation, ImportanceMap, budget, explain_gradient,
                              parse_explainer, top_k)
from ceval.metric import (CEvalPlot, MetricUnavailable, c_values, ceval_plot, compute_ceval,
                          compute_normalized, harmonic_estimate, json_float, near_affine_check,
                          pearson, rank_explainers, write_plot_csv, write_ranking_csv)
from ceval.models import MLPClassifier, TrainConfig, train
from ceval.oracle import make_random_affine, oracle_ceval, oracle_ceval_box
from conftest import affine, requires_mnist

ORACLE = AttackConfig("oracle")
HAND = affine([[1.0, 1.0], [0.0, 0.0]], [0.0, 0.0])
X_HAND = np.array([1.0, 1.0])


@pytest.fixture(scope="module")
def blob_mlp():
    data = make_gaussian_blobs(20, 3, 60, 3.0, seed=1)
    model = MLPClassifier(hidden_layer_sizes=(8,), input_shape=(1, 4, 5), num_classes=3)
    train(model, data, TrainConfig(epochs=10, batch_size=16, seed=0))
    return model, data.images.reshape(-1, 1, 4, 5)


def test_full_explanation_is_infinite():
    exp = Explanation([0, 1], 2)
    assert math.isinf(compute_ceval(HAND, X_HAND, exp, AttackConfig("iga")).c_value)
    assert compute_ceval(HAND, X_HAND, exp, ORACLE).to_dict()["c"] == "inf"


def test_empty_explanation_equals_unconstrained_attack(blob_mlp):
    model, xs = blob_mlp
    res = compute_ceval(model, xs[0], Explanation([], 20), AttackConfig("iga"))
    assert res.c_value == attack_iga(model, xs[0], Mask.empty(20)).l2_norm


def test_normalized_of_empty_is_exactly_one(blob_mlp):
    model, xs = blob_mlp
    for backend in ("gsa", "iga", "cw"):
        res = compute_normalized(model, xs[1], Explanation([], 20), AttackConfig(backend))
        assert res.normalized == 1.0


def test_normalized_hand_example():
    res = compute_normalized(HAND, X_HAND, Explanation([0], 2), ORACLE)
    assert res.normalized == pytest.approx(math.sqrt(2), abs=1e-12)
    assert res.c_value == 2.0 and res.c_empty == pytest.approx(math.sqrt(2))


def test_attack_failure_is_not_infinity():
    cfg = AttackConfig("gsa", eps_schedule=EpsSchedule(1e-4, 1.1, 2))
    with pytest.raises(MetricUnavailable):
        compute_ceval(HAND, X_HAND, Explanation([], 2), cfg)


def test_cw_ceval_matches_oracle_on_interior_affine():
    rng = np.random.default_rng(8)
    checked = 0
    for s in range(15):
        inst = make_random_affine(12, 4, seed=s, low=0.2, high=0.8)
        exp = Explanation(rng.choice(12, 3, replace=False), 12)
        mask = Mask.from_explanation(exp, 12)
        exact = oracle_ceval(inst, mask)
        if oracle_ceval_box(inst, mask) != pytest.approx(exact, rel=1e-12):
            continue
        c = compute_ceval(inst.to_model(), inst.x, exp, AttackConfig("cw")).c_value
        assert exact * (1 - 1e-9) <= c <= exact * 1.05
        checked += 1
    assert checked >= 5


# -------------------------------------------------------------------- plot
def test_plot_base_case_and_oracle_monotonicity():
    for s in range(30):
        inst = make_random_affine(10, 4, seed=s)
        model = inst.to_model()
        imp = ImportanceMap(np.random.default_rng(s).random(10))
        base = ceval_plot(model, inst.x, imp, [0], ORACLE)
        assert base.points == [(0, oracle_ceval(inst, Mask.empty(10)))]
        plot = ceval_plot(model, inst.x, imp, range(11), ORACLE)
        values = [c for _, c in plot.points]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert plot.monotone and math.isinf(values[-1])


def test_plot_records_gaps_and_violations(blob_mlp):
    cfg = AttackConfig("gsa", eps_schedule=EpsSchedule(1e-4, 1.1, 2))
    plot = ceval_plot(HAND, X_HAND, ImportanceMap([1.0, 0.5]), [0, 1, 2], cfg)
    assert plot.gaps == [0, 1] and math.isinf(plot.points[-1][1])
    flagged = CEvalPlot([(0, 1.0), (1, 0.8), (2, 2.0)], "x")
    assert flagged.height() == pytest.approx(3.8 / 3)
    model, xs = blob_mlp
    flagged_any = False
    for x in xs[:10]:
        plot = ceval_plot(model, x, explain_gradient(model, x), range(0, 20, 2),
                          AttackConfig("gsa"), slack=0.05)
        assert plot.gaps == [k for k, c in plot.points if c is None]
        values = [c for _, c in plot.points if c is not None]
        ks = [k for k, c in plot.points if c is not None]
        expected = [k for i, k in enumerate(ks) if values[i] < max(values[:i] + [-math.inf]) * 0.95]
        assert plot.violations == expected and plot.monotone == (not expected)
        flagged_any |= bool(expected)
    assert flagged_any


def test_plot_rejects_bad_k_lists():
    imp = ImportanceMap([1.0, 0.5])
    with pytest.raises(ValueError):
        ceval_plot(HAND, X_HAND, imp, [1, 1], ORACLE)
    with pytest.raises(ValueError):
        ceval_plot(HAND, X_HAND, imp, [0, 3], ORACLE)


# ------------------------------------------------------------ near affine
def test_harmonic_estimate_example():
    assert harmonic_estimate(2.0, 2.0) == pytest.approx(math.sqrt(2), abs=1e-15)


def test_near_affine_exact_for_single_hyperplane():
    for s in range(20):
        inst = make_random_affine(8, 2, seed=s)
        imp = ImportanceMap(np.random.default_rng(s).random(8))
        report = near_affine_check(inst.to_model(), inst.x, imp, [0, 2, 4, 7, 8], ORACLE)
        assert report.max_deviation < 1e-9
        assert [r.note for r in report.rows if r.k in (0, 8)] == ["explanation or complement empty"] * 2


def test_near_affine_on_mlp_is_finite(blob_mlp):
    model, xs = blob_mlp
    report = near_affine_check(model, xs[3], explain_gradient(model, xs[3]), [2, 5, 10],
                               AttackConfig("iga"))
    assert all(r.deviation is not None and math.isfinite(r.deviation) for r in report.rows)


# ----------------------------------------------------------------- pearson
def test_pearson_examples():
    assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    for bad in (([1], [1]), ([1, 1], [1, 2]), ([1, 2], [1, 2, 3])):
        with pytest.raises(ValueError):
            pearson(*bad)


floats = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(floats, floats), min_size=3, max_size=30),
       st.floats(0.01, 100), st.floats(-100, 100), st.booleans())
def test_pearson_symmetric_and_affine_invariant(pairs, a, b, negate):
    xs, ys = map(np.array, zip(*pairs))
    assume(np.std(xs) > 1e-3 and np.std(ys) > 1e-3)
    r = pearson(xs, ys)
    assert -1.0 <= r <= 1.0
    assert pearson(ys, xs) == pytest.approx(r, abs=1e-9)
    sign = -1.0 if negate else 1.0
    assert pearson(sign * a * xs + b, ys) == pytest.approx(sign * r, abs=1e-7)


def test_pearson_matches_numpy(rng):
    xs, ys = rng.normal(size=50), rng.normal(size=50)
    assert pearson(xs, ys) == pytest.approx(np.corrcoef(xs, ys)[0, 1], abs=1e-12)


# ----------------------------------------------------------------- ranking
def test_single_image_single_explainer_matches_compute_normalized(blob_mlp):
    model, xs = blob_mlp
    x = xs[2]
    rows = rank_explainers(model, [x], parse_explainer("gradient"), 0.1, AttackConfig("iga"))
    k = budget(20)
    direct = compute_normalized(model, x, top_k(explain_gradient(model, x), k), AttackConfig("iga"))
    assert len(rows) == 1 and rows[0].n == 1
    assert rows[0].values[0] == direct.normalized


def test_rank_rejects_bad_arguments():
    with pytest.raises(ValueError):
        rank_explainers(HAND, [X_HAND], parse_explainer("gradient"), 1.0, ORACLE)
    with pytest.raises(ValueError):
        rank_explainers(HAND, [], parse_explainer("gradient"), 0.1, ORACLE)


def test_budget_on_mnist_shape():
    assert budget(28 * 28, 0.1) == 79


def test_csv_exports(tmp_path, rng):
    model = affine(rng.normal(size=(3, 6)), rng.normal(size=3))
    xs = rng.uniform(size=(4, 6))
    rows = rank_explainers(model, xs, parse_explainer("gradient") + parse_explainer("dummy-random"),
                           0.3, ORACLE)
    write_ranking_csv(rows, tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        table = list(csv.DictReader(fh))
    assert list(table[0]) == ["explainer", "mean_C", "median_C", "q1", "q3", "n", "skipped"]
    assert [r["explainer"] for r in table] == ["gradient", "dummy-random"]
    plot = ceval_plot(model, xs[0], explain_gradient(model, xs[0]), [0, 3, 6], ORACLE)
    write_plot_csv(plot, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "k,c_value" and lines[-1] == "6,inf"


def test_json_float():
    assert json_float(math.inf) == "inf" and json_float(math.nan) is None and json_float(2) == 2.0


@requires_mnist
def test_mnist_gradient_normalized_range(mnist_mlp, mnist_test):
    rows = rank_explainers(mnist_mlp, mnist_test.images[:50], parse_explainer("gradient"), 0.1,
                           AttackConfig("iga"))
    values = rows[0].values
    assert rows[0].n + rows[0].skipped == 50
    assert 1.0 < np.mean(values) < 10.0


@pytest.mark.slow
@requires_mnist
def test_lime_beats_center_dummy_on_average(mnist_mlp, mnist_test):
    lime, center = parse_explainer("lime")[0], parse_explainer("dummy-center")[0]
    pairs = []
    for i, x in enumerate(mnist_test.images[:50]):
        masks = [Mask.from_explanation(s.explanation(mnist_mlp, x, 79, seed=i), 784)
                 for s in (lime, center)]
        (a, _), (b, _) = c_values(mnist_mlp, x, masks, AttackConfig("cw"))
        if a is not None and b is not None:
            pairs.append((a, b))
    assert len(pairs) >= 45
    ours, dummy = np.mean(pairs, axis=0)
    assert ours > dummy

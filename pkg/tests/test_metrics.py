import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import f1_score, roc_auc_score

from oracles import (au_pr_brute, au_roc_brute, ece_brute, ece_value, f1_brute, random_scored_set,
                     weighted_brute)
from uasmooth.metrics import (EvalReport, au_pr, au_roc, bucket_edges, confidence_buckets, ece, macro_f1,
                              weighted_aggregate)

grid_scores = st.lists(st.integers(0, 20).map(lambda k: k / 20), min_size=1, max_size=50)


def labelled(draw_scores):
    return st.integers(1, 50).flatmap(lambda n: st.tuples(
        st.lists(st.one_of(st.integers(0, 20).map(lambda k: k / 20), st.floats(0, 1)), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n)))


def test_au_pr_examples():
    assert au_pr([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
    assert au_pr([0.4, 0.6], [1, 0]) == 0.5
    assert au_pr([0.2, 0.3], [0, 0]) is None


def test_au_roc_examples():
    assert au_roc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
    assert au_roc([0.5] * 6, [1, 0, 1, 0, 0, 0]) == 0.5
    assert au_roc([0.1, 0.2], [1, 1]) is None


def test_f1_examples():
    assert macro_f1([0.9, 0.1, 0.7], [1, 0, 1]) == 1.0
    assert macro_f1([0.9, 0.9], [1, 0]) == pytest.approx(1 / 3, abs=1e-16)
    assert macro_f1([0.9, 0.6], [1, 1]) == 0.5


def test_ece_examples():
    assert ece([1.0, 0.0, 1.0], [1, 0, 1]) == 0.0
    assert ece([0.8, 0.8], [1, 0]) == pytest.approx(0.3, abs=1e-15)
    assert ece([], []) == 0.0


def test_bucket_edges_are_decimal():
    edges = bucket_edges()
    assert edges.tolist() == [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0]


def test_buckets_right_inclusive():
    b = confidence_buckets([0.5, 0.55, 0.45, 0.56, 1.0], [1, 1, 0, 1, 1])
    assert [x.count for x in b] == [3, 1, 0, 0, 0, 0, 0, 0, 0, 1]


def test_input_validation():
    with pytest.raises(ValueError):
        au_pr([0.1, 0.2], [1])
    with pytest.raises(ValueError):
        au_roc([0.1, float("nan")], [1, 0])
    with pytest.raises(ValueError):
        ece([0.1], [2])


@given(labelled(None))
def test_ranking_metrics_match_brute_force(data):
    s, y = data
    ap = au_pr(s, y)
    terms = au_pr_brute(s, y)
    if terms is None:
        assert ap is None
    else:
        assert ap == math.fsum(float(t) for t in terms)
        assert abs(ap - float(sum(terms))) <= 4 * math.ulp(1.0)
    roc = au_roc(s, y)
    ref = au_roc_brute(s, y)
    assert roc == (None if ref is None else float(ref))


@given(labelled(None))
def test_f1_and_ece_match_brute_force(data):
    s, y = data
    assert macro_f1(s, y) == float(f1_brute(s, y))
    assert ece(s, y) == ece_value(ece_brute(s, y), len(s))
    assert 0.0 <= ece(s, y) <= 1.0


def test_ece_can_exceed_one_half():
    # a confidently wrong prediction: confidence 1, accuracy 0
    assert ece([0.0], [1]) == 1.0
    assert ece([0.9, 0.1], [0, 1]) == pytest.approx(0.9, abs=1e-15)


def test_agrees_with_sklearn():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s, y = random_scored_set(rng)
        if 0 < sum(y) < len(y):
            assert au_roc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)
        pred = (np.asarray(s) >= 0.5).astype(int)
        ref = f1_score(y, pred, average="macro", labels=[0, 1], zero_division=0)
        assert macro_f1(s, y) == pytest.approx(ref, abs=1e-12)


@given(st.lists(st.floats(0.01, 0.99), min_size=2, max_size=30), st.lists(st.integers(0, 1), min_size=30, max_size=30))
def test_au_roc_monotone_invariance(s, y):
    y = y[: len(s)]
    t = [math.log(v / (1 - v)) * 3 + 7 for v in s]
    assert au_roc(s, y) == au_roc(t, y)


def test_ece_shrinks_for_calibrated_scores():
    rng = np.random.default_rng(3)
    vals = []
    for n in (200, 2000, 200_000):
        p = rng.random(n)
        y = (rng.random(n) < p).astype(int)
        vals.append(ece(p, y))
    assert vals[-1] < 0.01
    assert vals[-1] < vals[0]


def test_weighted_aggregate_examples():
    assert weighted_aggregate([0.42], [7]) == 0.42
    assert weighted_aggregate([0.8, 0.4], [3, 1]) == pytest.approx(0.7, abs=1e-15)
    assert weighted_aggregate([0.8, None], [3, 0]) == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(ValueError):
        weighted_aggregate([0.5, 0.5], [0, 0])


def thirty_task_fixture(seed=7):
    rng = np.random.default_rng(seed)
    n = 120
    labels = np.zeros((n, 30), dtype=int)
    for t in range(30):
        k = int(rng.integers(1, 25))
        labels[rng.choice(n, k, replace=False), t] = 1
    scores = np.clip(0.6 * labels + rng.normal(0.2, 0.25, size=(n, 30)), 0, 1)
    return scores, labels


def test_thirty_task_aggregation_matches_recomputation():
    scores, labels = thirty_task_fixture()
    report = EvalReport.from_predictions(scores, labels)
    counts = labels.sum(0).tolist()
    assert report.positives == counts
    for name, fn in (("au_pr", au_pr), ("au_roc", au_roc), ("f1", macro_f1), ("ece", ece)):
        per = [fn(scores[:, t], labels[:, t]) for t in range(30)]
        assert [m[name] for m in report.per_task] == per
        ref = weighted_brute(per, counts)
        assert report.aggregates[name] == pytest.approx(float(ref), abs=1e-15)
        w = [Fraction(c, sum(counts)) for c in counts]
        assert sum(w) == 1


def test_report_serialization():
    scores, labels = thirty_task_fixture(1)
    report = EvalReport.from_predictions(scores[:, :2], labels[:, :2])
    d = json.loads(report.to_json())
    assert set(d["weighted"]) == {"w_au_pr", "w_au_roc", "w_f1", "w_ece"}
    lines = dict(line.split("=", 1) for line in report.to_text().strip().splitlines())
    assert float(lines["w_au_pr"]) == report.aggregates["au_pr"]
    assert float(lines["task1.ece"]) == report.per_task[1]["ece"]
    assert int(lines["task0.positives"]) == report.positives[0]


def test_perfect_classifier_report():
    y = np.array([[1], [0], [0], [1], [0]])
    s = np.array([[0.99], [0.01], [0.02], [0.97], [0.03]])
    r = EvalReport.from_predictions(s, y)
    assert r.aggregates["au_pr"] == r.aggregates["au_roc"] == r.aggregates["f1"] == 1.0
    assert r.selection_metric() == 1.0

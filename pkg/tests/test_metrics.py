import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsem.metrics import (CSV_COLUMNS, MetricRecord, TripletPrediction, UndefinedMetric, accuracy,
                            communication_cost, mean_recall_at_k, micro_recall_at_k, per_predicate_recall,
                            read_history_jsonl, recall_at_k, relative_cost, rounds_to_target, write_history_csv,
                            write_history_jsonl)

T1, T2, X = (0, 1, 0), (2, 3, 1), (4, 4, 4)


def _pred(sid, triplets):
    n = len(triplets)
    return TripletPrediction.from_scores(sid, [(t, float(n - i)) for i, t in enumerate(triplets)])


def test_recall_basic_cases():
    assert recall_at_k({T1, T2}, _pred("a", [T1, X, T2]), 2) == 0.5
    assert recall_at_k({T1, T2}, _pred("a", [T2, T1, X]), 2) == 1.0
    assert recall_at_k({T1, T2}, TripletPrediction("a", []), 5) == 0.0


def test_recall_errors():
    with pytest.raises(UndefinedMetric):
        recall_at_k(set(), _pred("a", [T1]), 1)
    with pytest.raises(ValueError):
        recall_at_k({T1}, _pred("a", [T1]), 0)
    with pytest.raises(UndefinedMetric):
        mean_recall_at_k({"a": []}, {"a": _pred("a", [T1])}, 3)


def test_from_scores_sorts_and_dedupes():
    p = TripletPrediction.from_scores("s", [((1, 1, 1), 0.5), ((0, 0, 0), 0.5), ((1, 1, 1), 0.9), ((2, 0, 0), 0.7)])
    assert [t for t, _ in p.ranked] == [(1, 1, 1), (2, 0, 0), (0, 0, 0)]
    scores = [s for _, s in p.ranked]
    assert scores == sorted(scores, reverse=True)


def test_mean_recall_two_classes():
    gt = {"a": [(0, 0, 0)], "b": [(0, 0, 1)]}
    preds = {"a": _pred("a", [(0, 0, 0)]), "b": _pred("b", [X])}
    assert mean_recall_at_k(gt, preds, 1) == 0.5
    assert per_predicate_recall(gt, preds, 1) == {0: 1.0, 1: 0.0}


def test_mean_recall_single_class_equals_recall():
    gt = {"a": [(0, 1, 2), (3, 4, 2)], "b": [(5, 5, 2)]}
    preds = {"a": _pred("a", [(0, 1, 2), X]), "b": _pred("b", [X, (5, 5, 2)])}
    for k in (1, 2, 3):
        assert mean_recall_at_k(gt, preds, k) == micro_recall_at_k(gt, preds, k)


def skew_case():
    # Predicate 0: 100 ground-truth triplets, 99 recovered. Predicate 1: one, missed.
    gt, preds = {}, {}
    for i in range(100):
        gt[f"a{i}"] = [(i % 13, 0, 0)]
        preds[f"a{i}"] = _pred(f"a{i}", [(i % 13, 0, 0)] if i < 99 else [X])
    gt["b"] = [(1, 2, 1)]
    preds["b"] = _pred("b", [X])
    return gt, preds


def test_skewed_micro_vs_macro():
    gt, preds = skew_case()
    assert micro_recall_at_k(gt, preds, 20) == pytest.approx(99 / 101, abs=1e-15)
    assert round(micro_recall_at_k(gt, preds, 20), 2) == 0.98
    assert mean_recall_at_k(gt, preds, 20) == pytest.approx(0.495, abs=1e-15)
    assert per_predicate_recall(gt, preds, 20)[0] == 0.99


def test_absent_predicate_classes_excluded():
    gt = {"a": [(0, 0, 3)]}
    preds = {"a": _pred("a", [(0, 0, 3)])}
    assert mean_recall_at_k(gt, preds, 1) == 1.0


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2)), min_size=1, max_size=12,
                unique=True),
       st.lists(st.tuples(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2)), st.floats(0, 1)),
                max_size=30))
def test_recall_monotone_in_k_and_bounded(gt, scored):
    pred = TripletPrediction.from_scores("s", scored)
    vals = [recall_at_k(gt, pred, k) for k in range(1, 40)]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    mr = mean_recall_at_k({"s": gt}, {"s": pred}, 10)
    assert 0.0 <= mr <= 1.0


def test_accuracy_cases():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy([1, 0, 1], [0, 1, 0]) == 0.0
    assert accuracy([1, 1, 0, 0], [1, 0, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        accuracy([1, 2], [1])
    with pytest.raises(ValueError):
        accuracy([], [])


def test_rounds_to_target_cases():
    hist = [{"round": 1, "acc": 80}, {"round": 2, "acc": 84}, {"round": 3, "acc": 86}]
    assert rounds_to_target(hist, "acc", 85) == 3
    assert rounds_to_target(hist, "acc", 90) is None
    assert rounds_to_target(hist, "acc", 80) == 1
    with pytest.raises(KeyError):
        rounds_to_target(hist, "f1", 0.5)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0, 1))
def test_rounds_to_target_linear_scan(values, target):
    hist = [{"round": i + 1, "acc": v} for i, v in enumerate(values)]
    expected = None
    for i, v in enumerate(values):
        if v >= target:
            expected = i + 1
            break
    assert rounds_to_target(hist, "acc", target) == expected


def test_communication_cost():
    assert communication_cost(1000, 0) == 0
    assert communication_cost(2, 3) == 6
    assert round(relative_cost(communication_cost(10, 63), communication_cost(10, 64)), 2) == 0.98


def test_history_files_roundtrip(tmp_path):
    recs = [MetricRecord(r, 1.0 / r, 0.1 * r, 0.2, 0.3, 0.4, 0.05, 0.15, 0.25).as_dict() for r in (1, 2)]
    write_history_jsonl(tmp_path / "h.jsonl", recs)
    assert read_history_jsonl(tmp_path / "h.jsonl") == recs
    write_history_csv(tmp_path / "h.csv", recs)
    with open(tmp_path / "h.csv") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [float(v) for v in rows[1][1:]] == [recs[0][c] for c in CSV_COLUMNS[1:]]
    assert np.isclose(float(rows[2][1]), 0.5)

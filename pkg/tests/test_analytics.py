"""Selective-prediction metrics against brute-force oracles."""

import csv
import itertools
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrtriage.analytics import (
    LabeledPrediction,
    aurc,
    classification_metrics,
    coverage_at_risk,
    evaluate_run,
    fold_metrics,
    predictions_from_traces,
    read_labels,
    risk_at_coverage,
    risk_coverage_curve,
    stratified_kfold,
    write_curve_table,
)


def _pred(case_id, confidence, correct, label="positive", abstain=False):
    truth = label if correct else ("negative" if label == "positive" else "positive")
    return LabeledPrediction(
        case_id=case_id,
        confidence=confidence,
        predicted_label=label,
        true_label=truth,
        was_abstain=abstain,
    )


def _oracle_prefix_risks(preds):
    """Brute force: sort, then recount errors from scratch at every prefix."""
    ranked = sorted(preds, key=lambda pr: (-pr.confidence, pr.case_id))
    risks = []
    for k in range(1, len(ranked) + 1):
        errors = sum(1 for pr in ranked[:k] if pr.effective_label() != pr.true_label)
        risks.append(errors / k)
    return risks


def test_curve_matches_brute_force(rng):
    preds = [_pred(f"c{i:03d}", float(rng.random()), bool(rng.random() < 0.7)) for i in range(50)]
    points = risk_coverage_curve(preds)
    risks = _oracle_prefix_risks(preds)
    assert [pt.risk for pt in points] == risks
    assert [pt.coverage for pt in points] == [k / 50 for k in range(1, 51)]
    assert [pt.k for pt in points] == list(range(1, 51))


def test_ties_break_by_case_id():
    preds = [
        _pred("b", 0.9, correct=False),
        _pred("a", 0.9, correct=True),
        _pred("c", 0.8, correct=True),
    ]
    points = risk_coverage_curve(preds)
    # "a" (correct) ranks before "b" (wrong) despite equal confidence.
    assert [pt.risk for pt in points] == [0.0, 1 / 2, 1 / 3]


def test_aurc_exact_on_hand_case():
    # Ranked correctness pattern: right, wrong, right.
    preds = [
        _pred("a", 0.9, correct=True),
        _pred("b", 0.8, correct=False),
        _pred("c", 0.7, correct=True),
    ]
    assert aurc(preds) == (0.0 + 1 / 2 + 1 / 3) / 3


def test_risk_at_coverage_prefix_rule():
    preds = [
        _pred("a", 0.9, correct=True),
        _pred("b", 0.8, correct=False),
        _pred("c", 0.7, correct=True),
        _pred("d", 0.6, correct=True),
    ]
    assert risk_at_coverage(preds, 0.25) == 0.0  # k = 1
    assert risk_at_coverage(preds, 0.5) == 1 / 2  # k = 2
    assert risk_at_coverage(preds, 0.51) == 1 / 3  # k = ceil(2.04) = 3
    assert risk_at_coverage(preds, 1.0) == 1 / 4
    assert risk_at_coverage(preds, 1e-9) == 0.0  # k clamps up to 1
    with pytest.raises(ValueError):
        risk_at_coverage(preds, 0.0)
    with pytest.raises(ValueError):
        risk_at_coverage(preds, 1.1)


def test_coverage_at_risk_scans_from_full():
    preds = [
        _pred("a", 0.9, correct=True),
        _pred("b", 0.8, correct=True),
        _pred("c", 0.7, correct=False),
        _pred("d", 0.6, correct=True),
    ]
    # Prefix risks: 0, 0, 1/3, 1/4.
    assert coverage_at_risk(preds, 0.5) == 1.0
    assert coverage_at_risk(preds, 0.25) == 1.0  # boundary risk counts
    assert coverage_at_risk(preds, 0.2) == 0.5
    assert coverage_at_risk(preds, 0.0) == 0.5
    all_wrong = [_pred("a", 0.9, correct=False), _pred("b", 0.8, correct=False)]
    assert coverage_at_risk(all_wrong, 0.5) == 0.0
    with pytest.raises(ValueError):
        coverage_at_risk(preds, -0.1)


def test_exhaustive_small_patterns_match_oracle():
    """Every correctness pattern up to N=5 agrees with the prefix oracle."""
    for n in range(1, 6):
        confidences = [0.9 - 0.1 * i for i in range(n)]
        for pattern in itertools.product([True, False], repeat=n):
            preds = [
                _pred(f"c{i}", confidences[i], correct=pattern[i]) for i in range(n)
            ]
            risks = _oracle_prefix_risks(preds)
            assert aurc(preds) == sum(risks) / n
            exact = sum(Fraction(r).limit_denominator(10**9) for r in risks) / n
            assert abs(aurc(preds) - float(exact)) < 1e-12


def test_empty_curve_rejected():
    with pytest.raises(ValueError):
        risk_coverage_curve([])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.tuples(st.booleans(), st.floats(min_value=0.0, max_value=1.0)),
        min_size=1,
        max_size=30,
    )
)
def test_curve_invariants(spec):
    preds = [_pred(f"c{i:03d}", conf, correct) for i, (correct, conf) in enumerate(spec)]
    points = risk_coverage_curve(preds)
    assert all(0.0 <= pt.risk <= 1.0 for pt in points)
    assert points[-1].coverage == 1.0
    assert 0.0 <= aurc(preds) <= 1.0
    wrong_total = sum(1 for pr in preds if pr.effective_label() != pr.true_label)
    assert points[-1].risk == wrong_total / len(preds)


# ---------------------------------------------------------------------------
# classification metrics


def test_classification_metrics_confusion():
    preds = [
        _pred("a", 0.9, correct=True, label="positive"),
        _pred("b", 0.9, correct=False, label="positive"),
        _pred("c", 0.9, correct=True, label="negative"),
        _pred("d", 0.9, correct=False, label="negative"),
        _pred("e", 0.9, correct=True, label="negative"),
    ]
    m = classification_metrics(preds)
    assert (m["tp"], m["fp"], m["tn"], m["fn"]) == (1, 1, 2, 1)
    assert m["accuracy"] == 3 / 5
    assert m["precision"] == 1 / 2
    assert m["recall"] == 1 / 2


def test_metrics_undefined_rates_are_none():
    no_positive_calls = [_pred("a", 0.9, correct=True, label="negative")]
    m = classification_metrics(no_positive_calls)
    assert m["precision"] is None
    assert m["recall"] is None  # no actual positives either

    no_actual_positives = [_pred("a", 0.9, correct=False, label="positive")]
    m = classification_metrics(no_actual_positives)
    assert m["precision"] == 0.0
    assert m["recall"] is None


def test_effective_label_falls_back_to_posterior():
    pr = LabeledPrediction(
        case_id="x", confidence=0.7, predicted_label=None, true_label="positive", p=0.7
    )
    assert pr.effective_label() == "positive"
    bare = LabeledPrediction(
        case_id="x", confidence=0.7, predicted_label=None, true_label="positive"
    )
    with pytest.raises(ValueError):
        bare.effective_label()


# ---------------------------------------------------------------------------
# folds


def test_stratified_kfold_balance_and_coverage():
    items = [(f"p{i}", "positive") for i in range(7)] + [
        (f"n{i}", "negative") for i in range(11)
    ]
    folds = stratified_kfold(items, k=3, seed=0)
    assert sorted(c for fold in folds for c in fold) == sorted(c for c, _ in items)
    pos_counts = [sum(1 for c in fold if c.startswith("p")) for fold in folds]
    neg_counts = [sum(1 for c in fold if c.startswith("n")) for fold in folds]
    assert max(pos_counts) - min(pos_counts) <= 1
    assert max(neg_counts) - min(neg_counts) <= 1


def test_stratified_kfold_deterministic():
    items = [(f"c{i}", "positive" if i % 3 else "negative") for i in range(20)]
    assert stratified_kfold(items, k=4, seed=7) == stratified_kfold(items, k=4, seed=7)
    assert stratified_kfold(items, k=4, seed=7) != stratified_kfold(items, k=4, seed=8)


def test_stratified_kfold_validation():
    items = [("a", "positive"), ("b", "negative"), ("c", "negative")]
    with pytest.raises(ValueError, match="k >= 2"):
        stratified_kfold(items, k=1)
    with pytest.raises(ValueError, match="fewer than k"):
        stratified_kfold(items, k=2)  # one positive cannot fill two folds


def test_fold_metrics_shape(rng):
    preds = [_pred(f"c{i:02d}", float(rng.random()), i % 4 != 0, label="positive" if i % 2 else "negative") for i in range(24)]
    report = fold_metrics(preds, k=3, seed=1)
    assert report["k"] == 3
    assert len(report["fold_accuracy"]) == 3
    assert report["mean_accuracy"] == pytest.approx(sum(report["fold_accuracy"]) / 3)


# ---------------------------------------------------------------------------
# reports and files


def test_evaluate_run_report_shape():
    preds = [
        _pred("a", 0.95, correct=True),
        _pred("b", 0.90, correct=True),
        _pred("c", 0.70, correct=False, abstain=True),
        _pred("d", 0.60, correct=True),
    ]
    report = evaluate_run(preds, coverages=(0.5, 1.0), budgets=(0.0, 0.5))
    assert report["n_cases"] == 4
    full = report["full_coverage"]["selective"]
    assert set(full["risk_at_coverage"]) == {"0.5", "1.0"}
    assert set(full["coverage_at_risk"]) == {"0.0", "0.5"}
    assert full["abstain_fraction"] == 1 / 4
    auto = report["automation_coverage"]
    assert auto["coverage"] == 3 / 4
    assert auto["classification"]["n"] == 3
    assert "cross_validation" not in report


def test_evaluate_run_with_folds():
    preds = [
        _pred(f"c{i:02d}", 0.9 - 0.01 * i, correct=i % 3 != 0, label="positive" if i % 2 else "negative")
        for i in range(12)
    ]
    report = evaluate_run(preds, folds=2, seed=3)
    assert report["cross_validation"]["k"] == 2


def test_write_curve_table(tmp_path):
    preds = [_pred("a", 0.9, correct=True), _pred("b", 0.8, correct=False)]
    path = tmp_path / "curve.csv"
    write_curve_table(preds, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "coverage", "risk"]
    assert rows[1] == ["1", "0.5", "0.0"]
    assert rows[2] == ["2", "1.0", "0.5"]


def test_read_labels(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("case_id,label,file\nc1,positive,a.png\nc2, Negative ,b.png\n")
    assert read_labels(path) == {"c1": "positive", "c2": "negative"}

    bad = tmp_path / "bad.csv"
    bad.write_text("case_id,label\nc1,maybe\n")
    with pytest.raises(ValueError, match="bad label"):
        read_labels(bad)


def _trace(case_id, decision, label, confidence, p=0.8):
    return {
        "case_id": case_id,
        "decision": {
            "decision": decision,
            "final_label": label,
            "confidence": confidence,
        },
        "signals": {"p": p},
    }


def test_predictions_from_traces():
    traces = [
        _trace("c1", "accept", "positive", 0.9),
        _trace("c2", "abstain", "negative", 0.55),
        _trace("c3", "quarantine", None, None),
    ]
    preds = predictions_from_traces(traces, {"c1": "positive", "c2": "negative"})
    assert len(preds) == 2
    assert preds[0].case_id == "c1" and not preds[0].was_abstain
    assert preds[1].was_abstain
    assert preds[1].predicted_label == "negative"
    assert preds[1].p == 0.8


def test_predictions_from_traces_missing_label():
    with pytest.raises(ValueError, match="no truth label.*c1"):
        predictions_from_traces([_trace("c1", "accept", "positive", 0.9)], {})

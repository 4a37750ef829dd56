"""Selective-prediction analytics and evaluation reports.

The risk-coverage curve sorts cases by decision-time confidence (descending,
ties broken by case id ascending) and emits one point per prefix length k:
coverage k/N against risk = errors-in-prefix / k. The area under it (AURC)
is the mean of the N prefix risks. Abstained cases carry their suggested
label, so full-coverage metrics always see a prediction for every case;
automation-coverage metrics restrict to accepted cases.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class LabeledPrediction:
    case_id: str
    confidence: float
    predicted_label: str  # None allowed when only a posterior is given
    true_label: str
    was_abstain: bool = False
    p: float = None  # positive-class posterior, if known

    def effective_label(self, threshold: float = 0.5) -> str:
        if self.predicted_label is not None:
            return self.predicted_label
        if self.p is None:
            raise ValueError(f"case {self.case_id} has neither label nor posterior")
        return POSITIVE if self.p >= threshold else NEGATIVE


@dataclass(frozen=True)
class RiskCoveragePoint:
    k: int
    coverage: float
    risk: float


def _ordered(preds: list) -> list:
    return sorted(preds, key=lambda pr: (-pr.confidence, pr.case_id))


def risk_coverage_curve(preds: list) -> list:
    """One point per prefix of the confidence-ranked cases."""
    if not preds:
        raise ValueError("risk-coverage curve needs at least one prediction")
    n = len(preds)
    points = []
    errors = 0
    for k, pr in enumerate(_ordered(preds), start=1):
        if pr.effective_label() != pr.true_label:
            errors += 1
        points.append(RiskCoveragePoint(k=k, coverage=k / n, risk=errors / k))
    return points


def aurc(preds: list) -> float:
    """Mean prefix risk over the full curve."""
    points = risk_coverage_curve(preds)
    return sum(pt.risk for pt in points) / len(points)


def risk_at_coverage(preds: list, coverage: float) -> float:
    """Risk of the prefix of size ceil(coverage * N)."""
    if not 0.0 < coverage <= 1.0:
        raise ValueError(f"coverage must be in (0, 1], got {coverage}")
    points = risk_coverage_curve(preds)
    k = min(len(points), max(1, math.ceil(coverage * len(points))))
    return points[k - 1].risk


def coverage_at_risk(preds: list, budget: float) -> float:
    """Largest coverage whose prefix risk stays within the budget, else 0."""
    if budget < 0.0:
        raise ValueError(f"risk budget must be nonnegative, got {budget}")
    points = risk_coverage_curve(preds)
    for pt in reversed(points):
        if pt.risk <= budget:
            return pt.coverage
    return 0.0


def classification_metrics(preds: list, threshold: float = 0.5) -> dict:
    """Accuracy, precision and recall with positive = edema.

    Precision is None (absent, not zero) when nothing was predicted
    positive; recall likewise when there are no actual positives.
    """
    if not preds:
        raise ValueError("metrics need at least one prediction")
    tp = fp = tn = fn = 0
    for pr in preds:
        predicted = pr.effective_label(threshold)
        if predicted == POSITIVE:
            if pr.true_label == POSITIVE:
                tp += 1
            else:
                fp += 1
        else:
            if pr.true_label == POSITIVE:
                fn += 1
            else:
                tn += 1
    n = len(preds)
    return {
        "n": n,
        "accuracy": (tp + tn) / n,
        "precision": tp / (tp + fp) if (tp + fp) > 0 else None,
        "recall": tp / (tp + fn) if (tp + fn) > 0 else None,
        "tp": tp,
        "fp": fp,
        "tn": tn,
        "fn": fn,
    }


def stratified_kfold(items: list, k: int = 5, seed: int = 0) -> list:
    """Split (case_id, label) pairs into k folds, round-robin per class.

    Each class is shuffled with the seeded generator and dealt to folds in
    turn, keeping per-fold class counts within one of each other. A class
    with fewer members than k cannot fill every fold and is an error.
    """
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    by_class = {}
    for case_id, label in items:
        by_class.setdefault(label, []).append(case_id)
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    for label in sorted(by_class):
        ids = by_class[label]
        if len(ids) < k:
            raise ValueError(f"class {label!r} has {len(ids)} members, fewer than k={k}")
        order = rng.permutation(len(ids))
        for position, idx in enumerate(order):
            folds[position % k].append(ids[idx])
    return folds


def fold_metrics(preds: list, k: int = 5, seed: int = 0) -> dict:
    """Per-fold full-coverage accuracy plus mean and spread across folds."""
    by_id = {pr.case_id: pr for pr in preds}
    folds = stratified_kfold([(pr.case_id, pr.true_label) for pr in preds], k=k, seed=seed)
    accs = []
    for fold in folds:
        metrics = classification_metrics([by_id[c] for c in fold])
        accs.append(metrics["accuracy"])
    return {
        "k": k,
        "seed": seed,
        "fold_accuracy": accs,
        "mean_accuracy": float(np.mean(accs)),
        "std_accuracy": float(np.std(accs)),
    }


def selective_block(preds: list, coverages=(0.8,), budgets=(0.05,)) -> dict:
    return {
        "n": len(preds),
        "aurc": aurc(preds),
        "risk_at_coverage": {repr(c): risk_at_coverage(preds, c) for c in coverages},
        "coverage_at_risk": {repr(b): coverage_at_risk(preds, b) for b in budgets},
        "abstain_fraction": sum(1 for pr in preds if pr.was_abstain) / len(preds),
    }


def evaluate_run(preds: list, coverages=(0.8,), budgets=(0.05,), folds: int = None, seed: int = 0) -> dict:
    """Assemble the full report: both coverage modes plus optional folds."""
    accepted = [pr for pr in preds if not pr.was_abstain]
    report = {
        "ranking": "cases ranked by decision-time confidence, ties by case_id",
        "n_cases": len(preds),
        "full_coverage": {
            "classification": classification_metrics(preds),
            "selective": selective_block(preds, coverages, budgets),
        },
        "automation_coverage": {
            "coverage": len(accepted) / len(preds) if preds else 0.0,
            "classification": classification_metrics(accepted) if accepted else None,
            "selective": selective_block(accepted, coverages, budgets) if accepted else None,
        },
    }
    if folds:
        report["cross_validation"] = fold_metrics(preds, k=folds, seed=seed)
    return report


def write_curve_table(preds: list, path) -> None:
    """Plot-ready curve: one row per prefix, k, coverage, risk."""
    points = risk_coverage_curve(preds)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "coverage", "risk"])
        for pt in points:
            writer.writerow([pt.k, repr(pt.coverage), repr(pt.risk)])


# ---------------------------------------------------------------------------
# building predictions from run outputs


def read_labels(path) -> dict:
    """Read a truth table CSV with case_id and label columns."""
    labels = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            label = row["label"].strip().lower()
            if label not in (POSITIVE, NEGATIVE):
                raise ValueError(f"bad label {row['label']!r} for case {row['case_id']}")
            labels[row["case_id"]] = label
    return labels


def predictions_from_traces(traces: list, labels: dict) -> list:
    """Pair decided traces with truth labels; quarantines are skipped."""
    preds = []
    missing = []
    for trace in traces:
        decision = trace["decision"]
        if decision["decision"] == "quarantine":
            continue
        case_id = trace["case_id"]
        truth = labels.get(case_id)
        if truth is None:
            missing.append(case_id)
            continue
        preds.append(
            LabeledPrediction(
                case_id=case_id,
                confidence=float(decision["confidence"]),
                predicted_label=decision["final_label"],
                true_label=truth,
                was_abstain=decision["decision"] == "abstain",
                p=trace["signals"]["p"] if trace.get("signals") else None,
            )
        )
    if missing:
        raise ValueError(f"no truth label for case(s): {', '.join(sorted(missing)[:5])}")
    return preds

"""Image- and patient-level accuracy and the binary classification scores.

Malignant (label 1) is the positive class for precision, recall and Dice.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

TABLE_COLUMNS = ("Precision", "Recall", "Weight-F1", "Acc", "Balance-Acc", "Kappa", "Dice")
_FIELDS = ("precision", "recall", "weighted_f1", "accuracy", "balanced_accuracy", "kappa", "dice")


@dataclass(frozen=True)
class EvaluationRecord:
    item_id: str
    patient_id: str
    true_label: int
    predicted_label: int
    fold: int = 0
    magnification: str = "NA"

    def __post_init__(self):
        if self.true_label not in (0, 1) or self.predicted_label not in (0, 1):
            raise ValueError("labels must be binary")
        if not self.patient_id:
            raise ValueError("patient id must be non-empty")


@dataclass
class ClassificationScores:
    precision: float
    recall: float
    weighted_f1: float
    accuracy: float
    balanced_accuracy: float
    kappa: float
    dice: float
    image_level_accuracy: float = float("nan")
    patient_level_accuracy: float = float("nan")
    undefined: tuple[str, ...] = ()

    def table_row(self) -> list[float]:
        return [getattr(self, f) for f in _FIELDS]


def _require(records):
    records = list(records)
    if not records:
        raise ValueError("no evaluation records")
    return records


def image_level_accuracy(records) -> float:
    records = _require(records)
    return sum(r.true_label == r.predicted_label for r in records) / len(records)


def patient_level_accuracy(records) -> float:
    """Mean of per-patient accuracies; every patient weighs the same."""
    records = _require(records)
    hits: dict[str, list[int]] = defaultdict(list)
    for r in records:
        hits[r.patient_id].append(int(r.true_label == r.predicted_label))
    return float(np.mean([np.mean(v) for v in hits.values()]))


def confusion(y_true, y_pred) -> tuple[int, int, int, int]:
    """(TP, FN, FP, TN) with malignant = 1 as the positive class."""
    t = np.asarray(y_true, dtype=int)
    p = np.asarray(y_pred, dtype=int)
    tp = int(np.sum((t == 1) & (p == 1)))
    fn = int(np.sum((t == 1) & (p == 0)))
    fp = int(np.sum((t == 0) & (p == 1)))
    tn = int(np.sum((t == 0) & (p == 0)))
    return tp, fn, fp, tn


def scores_from_confusion(tp: int, fn: int, fp: int, tn: int) -> ClassificationScores:
    undefined: list[str] = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    n = tp + fn + fp + tn
    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    dice = ratio(2 * tp, 2 * tp + fp + fn, "dice")
    # Negative-class F1 from the mirrored confusion matrix.
    f1_neg = ratio(2 * tn, 2 * tn + fn + fp, "f1_benign")
    spec = ratio(tn, tn + fp, "specificity")
    support_pos, support_neg = tp + fn, tn + fp
    weighted_f1 = ratio(dice * support_pos + f1_neg * support_neg, n, "weighted_f1")
    accuracy = ratio(tp + tn, n, "accuracy")
    present = [r for r, s in ((recall, support_pos), (spec, support_neg)) if s > 0]
    balanced = float(np.mean(present)) if present else 0.0
    p_o = accuracy
    p_e = ratio(support_pos * (tp + fp) + support_neg * (tn + fn), n * n, "chance_agreement")
    kappa = ratio(p_o - p_e, 1.0 - p_e, "kappa") if p_e != 1.0 else ratio(0, 0, "kappa")
    return ClassificationScores(
        precision, recall, weighted_f1, accuracy, balanced, kappa, dice, undefined=tuple(undefined)
    )


def classification_scores(records) -> ClassificationScores:
    records = _require(records)
    scores = scores_from_confusion(
        *confusion([r.true_label for r in records], [r.predicted_label for r in records])
    )
    scores.image_level_accuracy = image_level_accuracy(records)
    scores.patient_level_accuracy = patient_level_accuracy(records)
    return scores


@dataclass
class MetricsReport:
    folds: list[int]
    per_fold: list[ClassificationScores]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)


_ALL_FIELDS = _FIELDS + ("image_level_accuracy", "patient_level_accuracy")


def evaluate_records(records) -> MetricsReport:
    """Group records by fold, score each fold, then mean and sample std across folds."""
    records = _require(records)
    folds = sorted({r.fold for r in records})
    per_fold = [classification_scores([r for r in records if r.fold == f]) for f in folds]
    mean, std = {}, {}
    for name in _ALL_FIELDS:
        vals = np.array([getattr(s, name) for s in per_fold])
        mean[name] = float(vals.mean())
        std[name] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return MetricsReport(folds, per_fold, mean, std)


def write_report_csv(path, report: MetricsReport) -> None:
    """One row per fold plus a mean row, columns in table order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("Fold",) + TABLE_COLUMNS)
        for fold, s in zip(report.folds, report.per_fold):
            w.writerow([fold] + [f"{v:.6f}" for v in s.table_row()])
        w.writerow(["mean"] + [f"{report.mean[f]:.6f}" for f in _FIELDS])


def write_level_accuracy_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("Fold", "Image-Acc", "Patient-Acc"))
        for fold, s in zip(report.folds, report.per_fold):
            w.writerow([fold, f"{s.image_level_accuracy:.6f}", f"{s.patient_level_accuracy:.6f}"])
        w.writerow(
            [
                "mean",
                f"{report.mean['image_level_accuracy']:.6f}",
                f"{report.mean['patient_level_accuracy']:.6f}",
            ]
        )

"""Subject-level metrics: PR/ROC curves, max-F1 operating point,
severity-band breakdowns, and cross-fold aggregation.

All curve metrics sweep thresholds over the distinct scores in
descending order with the inclusive decision rule ``score >= t``.
PR-AUC is the step-wise average-precision estimator (no trapezoid
interpolation); ROC-AUC is the trapezoid integral, which equals the
Mann-Whitney pair statistic exactly because it is accumulated in
integer arithmetic.
"""

import csv
import math
from dataclasses import dataclass, field, asdict

import numpy as np

SEVERITY_BANDS = (("10-14", 10, 14), ("15-19", 15, 19),
                  ("20-24", 20, 24), ("10-24", 10, 24))
HEALTHY_MAX = 9


class DegenerateLabelsError(ValueError):
    """Raised when a metric needs both classes but got one."""


@dataclass(frozen=True)
class ScoredSubject:
    speaker_id: str
    score: float
    label: int
    phq8: int


@dataclass
class MetricsReport:
    """Everything measured on one evaluated fold."""

    fold_index: int
    pr_auc: float
    roc_auc: float
    best_threshold: float
    f1: float
    precision: float
    recall: float
    severity_rows: dict = field(default_factory=dict)
    n_subjects: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def _sorted_counts(scored):
    """Scores descending; cumulative tp/fp at each distinct-score block end.

    Returns (thresholds, tp, fp, P, N) where arrays have one entry per
    distinct score.
    """
    if not scored:
        raise DegenerateLabelsError("no subjects to score")
    scores = np.asarray([s.score for s in scored], dtype=np.float64)
    labels = np.asarray([s.label for s in scored], dtype=np.int64)
    P = int(labels.sum())
    N = len(labels) - P
    if P == 0 or N == 0:
        raise DegenerateLabelsError(
            f"need both classes, got {P} positive / {N} negative")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ends = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    tp = np.cumsum(y)[ends]
    fp = ends + 1 - tp
    return s[ends], tp, fp, P, N


def pr_curve(scored) -> list:
    """[(recall, precision, threshold)] over the descending threshold sweep."""
    thresholds, tp, fp, P, _ = _sorted_counts(scored)
    return [(tp[i] / P, tp[i] / (tp[i] + fp[i]), float(thresholds[i]))
            for i in range(len(thresholds))]


def pr_auc(scored) -> float:
    """Average precision: mean over positives of precision at their rank.

    A tied block contributes its end-of-block precision once per
    positive inside it, so constant scores give exactly the prevalence.
    """
    scores = np.asarray([s.score for s in scored], dtype=np.float64)
    labels = np.asarray([s.label for s in scored], dtype=np.int64)
    thresholds, tp, fp, P, _ = _sorted_counts(scored)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    block = np.searchsorted(-thresholds, -s)  # block index of each element
    prec_at = tp / (tp + fp)
    return float(np.sum(prec_at[block][y == 1]) / P)


def roc_curve(scored) -> list:
    """[(fpr, tpr, threshold)] over the descending threshold sweep."""
    thresholds, tp, fp, P, N = _sorted_counts(scored)
    return [(fp[i] / N, tp[i] / P, float(thresholds[i]))
            for i in range(len(thresholds))]


def roc_auc(scored) -> float:
    """Trapezoid area under the ROC curve from (0,0).

    The numerator sum(dfp * (tp_prev + tp_cur)) is integer, so the
    result equals (concordant + 0.5 * tied) / (P * N) bit-for-bit.
    """
    _, tp, fp, P, N = _sorted_counts(scored)
    tp = np.concatenate([[0], tp])
    fp = np.concatenate([[0], fp])
    num = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    return num / (2.0 * P * N)


def best_f1(curve) -> tuple:
    """(threshold, f1, precision, recall) maximizing F1 over curve points.

    The curve is threshold-descending; strict improvement keeps the
    earliest (highest-threshold) argmax.
    """
    if not curve:
        raise ValueError("empty curve")
    best = None
    for recall, precision, threshold in curve:
        f1 = 0.0 if precision + recall == 0 else (
            2.0 * precision * recall / (precision + recall))
        if best is None or f1 > best[1]:
            best = (threshold, f1, precision, recall)
    return best


def severity_report(scored, threshold: float) -> dict:
    """Per-band (f1, precision, recall) at one fixed threshold.

    Each band restricts to healthy subjects (phq8 <= 9) plus subjects
    whose phq8 falls in the band; empty bands are omitted.
    """
    rows = {}
    healthy = [s for s in scored if s.phq8 <= HEALTHY_MAX]
    for name, lo, hi in SEVERITY_BANDS:
        band = [s for s in scored if lo <= s.phq8 <= hi]
        if not band:
            continue
        tp = sum(1 for s in band if s.score >= threshold)
        fn = len(band) - tp
        fp = sum(1 for s in healthy if s.score >= threshold)
        tn = len(healthy) - fp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 0.0 if precision + recall == 0 else (
            2.0 * precision * recall / (precision + recall))
        rows[name] = {"f1": f1, "precision": precision, "recall": recall,
                      "tp": tp, "fp": fp, "fn": fn, "tn": tn,
                      "n": len(band) + len(healthy)}
    return rows


def evaluate_fold(scored, fold_index: int = 0) -> MetricsReport:
    """Full per-fold report: curves, max-F1 point, severity rows."""
    curve = pr_curve(scored)
    threshold, f1, precision, recall = best_f1(curve)
    return MetricsReport(
        fold_index=fold_index,
        pr_auc=pr_auc(scored),
        roc_auc=roc_auc(scored),
        best_threshold=threshold,
        f1=f1,
        precision=precision,
        recall=recall,
        severity_rows=severity_report(scored, threshold),
        n_subjects=len(scored),
    )


def mean_sem(values) -> tuple:
    """(mean, standard error) with the n-1 variance divisor."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least 2 folds to aggregate")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def aggregate_folds(reports) -> dict:
    """Cross-fold mean +- standard error for every scalar metric."""
    out = {}
    for metric in ("pr_auc", "roc_auc", "f1", "precision", "recall"):
        out[metric] = mean_sem([getattr(r, metric) for r in reports])
    return out


def format_mean_sem(mean: float, sem: float, scale: float = 100.0) -> str:
    """Render like '79.65 ± 2.02' (percent scale, two decimals)."""
    return f"{mean * scale:.2f} ± {sem * scale:.2f}"


def save_curve_csv(path, curve, kind: str) -> None:
    """Persist a curve as CSV: threshold,x,y rows.

    kind 'pr' writes recall,precision; kind 'roc' writes fpr,tpr.
    """
    header = {"pr": ("threshold", "recall", "precision"),
              "roc": ("threshold", "fpr", "tpr")}[kind]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y, threshold in curve:
            w.writerow([repr(threshold), repr(float(x)), repr(float(y))])

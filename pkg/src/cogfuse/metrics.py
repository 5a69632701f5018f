"""Screening metrics: confusion-based rates, regression errors, aggregation.

The positive class is MCI (label 1).  With TP/FP/TN/FN from the confusion
counts:

* sensitivity  rho   = TP / (TP + FN)
* specificity  sigma = TN / (TN + FP)
* precision    pi    = TP / (TP + FP)
* UAR  = (sigma + rho) / 2
* F1   = 2 * pi * rho / (pi + rho)

A zero denominator yields the value 0 and the metric's name in the
report's ``degenerate`` set, so summary statistics stay total functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, IntegrityError

CLASSIFICATION_METRICS = ("uar", "f1", "specificity", "sensitivity", "precision")
REGRESSION_METRICS = ("rmse", "r2")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_counts(preds, labels) -> ConfusionCounts:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1 or preds.size == 0:
        raise ContractError(f"predictions {preds.shape} and labels {labels.shape} must be equal-length non-empty vectors")
    bad = set(np.unique(preds)) | set(np.unique(labels))
    if not bad.issubset({0, 1}):
        raise ContractError(f"class values must be 0 or 1, got {sorted(bad)}")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


@dataclass(frozen=True)
class ClassificationReport:
    uar: float
    f1: float
    specificity: float
    sensitivity: float
    precision: float
    counts: ConfusionCounts
    degenerate: frozenset[str] = frozenset()

    def metric_values(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in CLASSIFICATION_METRICS}

    def to_dict(self) -> dict:
        doc = self.metric_values()
        doc["counts"] = {"tp": self.counts.tp, "fp": self.counts.fp, "tn": self.counts.tn, "fn": self.counts.fn}
        doc["degenerate"] = sorted(self.degenerate)
        return doc


def _ratio(num: int, den: int, name: str, degenerate: set[str]) -> float:
    if den == 0:
        degenerate.add(name)
        return 0.0
    return num / den


def classification_report(counts: ConfusionCounts) -> ClassificationReport:
    degenerate: set[str] = set()
    rho = _ratio(counts.tp, counts.tp + counts.fn, "sensitivity", degenerate)
    sigma = _ratio(counts.tn, counts.tn + counts.fp, "specificity", degenerate)
    pi = _ratio(counts.tp, counts.tp + counts.fp, "precision", degenerate)
    if pi + rho == 0.0:
        degenerate.add("f1")
        f1 = 0.0
    else:
        f1 = 2.0 * pi * rho / (pi + rho)
    return ClassificationReport(
        uar=(sigma + rho) / 2.0,
        f1=f1,
        specificity=sigma,
        sensitivity=rho,
        precision=pi,
        counts=counts,
        degenerate=frozenset(degenerate),
    )


@dataclass(frozen=True)
class RegressionReport:
    rmse: float
    r2: float
    n: int
    degenerate: frozenset[str] = frozenset()

    def metric_values(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in REGRESSION_METRICS}

    def to_dict(self) -> dict:
        doc = self.metric_values()
        doc["n"] = self.n
        doc["degenerate"] = sorted(self.degenerate)
        return doc


def rmse(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 1 or preds.size == 0:
        raise ContractError(f"predictions {preds.shape} and targets {targets.shape} must be equal-length non-empty vectors")
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


def r_squared(preds, targets, spread: str = "targets") -> float:
    """Coefficient of determination, 1 - SS_res / SS_spread.

    ``spread="targets"`` is the standard form: the denominator measures the
    targets' spread around their own mean.  ``spread="predictions"`` is an
    alternative reading that measures the predictions' spread around the
    target mean; it is exposed for comparison only and can exceed 1 or
    divide by zero for a constant predictor.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 1 or preds.size == 0:
        raise ContractError(f"predictions {preds.shape} and targets {targets.shape} must be equal-length non-empty vectors")
    if spread not in ("targets", "predictions"):
        raise ContractError(f"spread must be 'targets' or 'predictions', got {spread!r}")
    target_mean = targets.mean()
    ss_res = float(np.sum((preds - targets) ** 2))
    base = targets if spread == "targets" else preds
    ss_spread = float(np.sum((base - target_mean) ** 2))
    if ss_spread == 0.0:
        return 0.0
    return 1.0 - ss_res / ss_spread


def regression_report(preds, targets) -> RegressionReport:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    degenerate: set[str] = set()
    if float(np.sum((targets - targets.mean()) ** 2)) == 0.0:
        degenerate.add("r2")
    return RegressionReport(
        rmse=rmse(preds, targets),
        r2=r_squared(preds, targets),
        n=int(preds.size),
        degenerate=frozenset(degenerate),
    )


# ---------------------------------------------------------------------------
# per-subject aggregation
# ---------------------------------------------------------------------------


def aggregate_per_subject(records, values) -> np.ndarray:
    """Replace each record's value with its subject's mean over all 3 records.

    ``values`` are positive-class probabilities (classification) or score
    predictions (regression), aligned with ``records``.  The averaged value
    is written back to every record of the subject so that per-sample and
    per-subject metrics stay directly comparable.  For classification the
    caller applies the strict decision rule: MCI iff mean probability > 0.5.
    """
    values = np.asarray(values, dtype=np.float64)
    records = list(records)
    if values.shape != (len(records),):
        raise ContractError(f"need one value per record, got {values.shape} for {len(records)} records")
    groups: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        groups.setdefault(rec.subject_id, []).append(i)
    out = np.empty_like(values)
    for subject_id, idx in groups.items():
        if len(idx) != 3:
            raise IntegrityError(f"subject {subject_id!r} has {len(idx)} records, expected 3")
        out[idx] = values[idx].mean()
    return out


# ---------------------------------------------------------------------------
# fold summaries
# ---------------------------------------------------------------------------


def summarize_folds(metric_rows: list[dict[str, float]]) -> dict[str, dict[str, float]]:
    """Mean and population SD of each metric across folds."""
    if not metric_rows:
        raise ContractError("cannot summarize zero folds")
    names = list(metric_rows[0])
    summary: dict[str, dict[str, float]] = {}
    for name in names:
        vals = np.asarray([row[name] for row in metric_rows], dtype=np.float64)
        summary[name] = {"mean": float(vals.mean()), "sd": float(vals.std())}
    return summary


def format_mean_sd(mean: float, sd: float, percent: bool = False) -> str:
    """Two-decimal rendering, optionally on the percent scale."""
    if percent:
        return f"{100.0 * mean:.2f} ± {100.0 * sd:.2f}"
    return f"{mean:.2f} ± {sd:.2f}"

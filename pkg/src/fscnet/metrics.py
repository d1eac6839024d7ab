"""Confusion-matrix evaluation: accuracy, precision, recall, F1, Cohen's kappa.

Ratios with a zero denominator are reported as ``None`` and rendered as
"undefined", never as NaN. Display rounds to 4 decimal places; the stored
values keep full precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _sigmoid_stable


@dataclass
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class EvalReport:
    matrix: ConfusionMatrix
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    kappa: float | None
    threshold: float


def confusion(logits, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Counts under the decision rule sigmoid(logit) >= threshold => predict 1."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    z = z.reshape(-1)
    y = y.reshape(-1).astype(int)
    if z.size == 0:
        raise ValueError("confusion needs at least one sample")
    if z.size != y.size:
        raise ValueError(f"got {z.size} predictions for {y.size} labels")
    pred = (_sigmoid_stable(z) >= threshold).astype(int)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def compute_metrics(matrix: ConfusionMatrix, threshold: float = 0.5) -> EvalReport:
    tp, fp, tn, fn = matrix.tp, matrix.fp, matrix.tn, matrix.fn
    total = matrix.total
    if total < 1:
        raise ValueError("empty confusion matrix")
    accuracy = (tp + tn) / total
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    # chance agreement from the marginal products
    p_o = accuracy
    p_e = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (total * total)
    kappa = None if p_e == 1.0 else (p_o - p_e) / (1.0 - p_e)
    return EvalReport(matrix=matrix, accuracy=accuracy, precision=precision,
                      recall=recall, f1=f1, kappa=kappa, threshold=threshold)


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.4f}"


def format_report(report: EvalReport) -> str:
    m = report.matrix
    lines = [
        f"confusion  tp={m.tp} fp={m.fp} tn={m.tn} fn={m.fn}  (n={m.total}, threshold={report.threshold})",
        f"accuracy   {_fmt(report.accuracy)}",
        f"precision  {_fmt(report.precision)}",
        f"recall     {_fmt(report.recall)}",
        f"f1         {_fmt(report.f1)}",
        f"kappa      {_fmt(report.kappa)}",
    ]
    return "\n".join(lines)


def report_record(report: EvalReport, extra: dict | None = None) -> str:
    """Single-line machine-readable JSON record of a report."""
    payload = {
        "matrix": {"tp": report.matrix.tp, "fp": report.matrix.fp,
                   "tn": report.matrix.tn, "fn": report.matrix.fn},
        "accuracy": report.accuracy,
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "kappa": report.kappa,
        "threshold": report.threshold,
    }
    if extra:
        payload.update(extra)
    return json.dumps(payload, sort_keys=True)

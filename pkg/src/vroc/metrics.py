"""Evaluation: confusion matrices, precision/recall/F1 reports, the
protocol runners (stratified holdout and leave-one-event-out), and table
rendering.

Zero-division convention: a precision, recall or F1 whose denominator is
zero resolves to 0.  By default every class of the label set counts
toward the macro averages even with zero support (so a model ignoring a
rare class pays for it); ``skip_absent`` drops classes that appear in
neither gold nor predicted labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    """Square count matrix indexed [gold][predicted]."""

    counts: np.ndarray
    classes: tuple

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __post_init__(self):
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"ConfusionMatrix: counts must be square, got {self.counts.shape}")
        if len(self.classes) != self.counts.shape[0]:
            raise ValueError(
                f"ConfusionMatrix: {len(self.classes)} class names for "
                f"{self.counts.shape[0]} rows"
            )
        if np.any(self.counts < 0):
            raise ValueError("ConfusionMatrix: negative count")


@dataclass(frozen=True)
class MetricsReport:
    """Accuracy plus per-class and macro-averaged precision/recall/F1.

    ``macro_f1`` is the unweighted mean of per-class F1; ``support`` is
    the gold count per class.
    """

    classes: tuple
    accuracy: float
    precision: tuple
    recall: tuple
    f1: tuple
    support: tuple
    macro_precision: float
    macro_recall: float
    macro_f1: float
    cm: ConfusionMatrix


def confusion_matrix(golds, preds, n_classes: int, classes=None) -> ConfusionMatrix:
    """Count (gold, predicted) pairs into an n_classes x n_classes matrix."""
    golds = np.asarray(golds, dtype=np.intp)
    preds = np.asarray(preds, dtype=np.intp)
    if golds.shape != preds.shape or golds.ndim != 1:
        raise ValueError(
            f"confusion_matrix: golds {golds.shape} and preds {preds.shape} "
            "must be equal-length 1-D sequences"
        )
    if golds.size == 0:
        raise ValueError("confusion_matrix: empty input")
    if n_classes < 1:
        raise ValueError(f"confusion_matrix: n_classes must be >= 1, got {n_classes}")
    for name, arr in (("gold", golds), ("predicted", preds)):
        if arr.min() < 0 or arr.max() >= n_classes:
            bad = int(arr[(arr < 0) | (arr >= n_classes)][0])
            raise ValueError(f"confusion_matrix: {name} label {bad} out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (golds, preds), 1)
    if classes is None:
        classes = tuple(str(i) for i in range(n_classes))
    return ConfusionMatrix(counts=counts, classes=tuple(classes))


def _safe_div(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def compute_metrics(cm: ConfusionMatrix, skip_absent: bool = False) -> MetricsReport:
    """Per-class precision/recall/F1 and their unweighted macro means.

    ``skip_absent`` removes classes with zero gold and zero predicted
    instances from the macro averages (they still appear per-class).
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("compute_metrics: confusion matrix is empty")
    tp = np.diag(counts)
    gold = counts.sum(axis=1)
    pred = counts.sum(axis=0)
    precision = [_safe_div(tp[i], pred[i]) for i in range(len(tp))]
    recall = [_safe_div(tp[i], gold[i]) for i in range(len(tp))]
    f1 = [_safe_div(2.0 * p * r, p + r) for p, r in zip(precision, recall)]
    if skip_absent:
        keep = [i for i in range(len(tp)) if gold[i] > 0 or pred[i] > 0]
    else:
        keep = list(range(len(tp)))
    if not keep:
        raise ValueError("compute_metrics: no class has any gold or predicted instance")
    return MetricsReport(
        classes=cm.classes,
        accuracy=float(tp.sum() / total),
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        support=tuple(int(g) for g in gold),
        macro_precision=float(np.mean([precision[i] for i in keep])),
        macro_recall=float(np.mean([recall[i] for i in keep])),
        macro_f1=float(np.mean([f1[i] for i in keep])),
        cm=cm,
    )


def aggregate_reports(reports) -> MetricsReport:
    """Unweighted mean of several reports over one class set: metric
    fields are averaged, supports and confusion counts summed."""
    reports = list(reports)
    if not reports:
        raise ValueError("aggregate_reports: nothing to aggregate")
    classes = reports[0].classes
    for r in reports[1:]:
        if r.classes != classes:
            raise ValueError(
                f"aggregate_reports: class sets differ ({r.classes} vs {classes})"
            )
    n = len(reports)

    def mean_tuple(field):
        return tuple(float(np.mean([getattr(r, field)[i] for r in reports]))
                     for i in range(len(classes)))

    summed = sum((r.cm.counts for r in reports), np.zeros((len(classes), len(classes)), dtype=np.int64))
    return MetricsReport(
        classes=classes,
        accuracy=float(np.mean([r.accuracy for r in reports])),
        precision=mean_tuple("precision"),
        recall=mean_tuple("recall"),
        f1=mean_tuple("f1"),
        support=tuple(int(sum(r.support[i] for r in reports)) for i in range(len(classes))),
        macro_precision=float(np.mean([r.macro_precision for r in reports])),
        macro_recall=float(np.mean([r.macro_recall for r in reports])),
        macro_f1=float(np.mean([r.macro_f1 for r in reports])),
        cm=ConfusionMatrix(counts=summed, classes=classes),
    )


def _rows(reports) -> list:
    if isinstance(reports, MetricsReport):
        return [("overall", reports)]
    if isinstance(reports, dict):
        return list(reports.items())
    return list(reports)


def render_report(reports) -> str:
    """Plain-text table: one row per report, columns Accuracy, Macro-F1
    and per-class F1 in the class order carried by the reports.

    ``reports`` may be a single MetricsReport, a name -> report mapping,
    or a list of (name, report) pairs.
    """
    rows = _rows(reports)
    classes = rows[0][1].classes
    header = ["run", "accuracy", "macro-f1"] + [f"f1:{c}" for c in classes]
    table = [header]
    for name, rep in rows:
        table.append([name, f"{rep.accuracy:.4f}", f"{rep.macro_f1:.4f}"]
                     + [f"{v:.4f}" for v in rep.f1])
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = []
    for row in table:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def report_tsv(reports) -> str:
    """Tab-separated rendering with the same columns as render_report,
    plus per-class precision and recall."""
    rows = _rows(reports)
    classes = rows[0][1].classes
    header = (["run", "accuracy", "macro_precision", "macro_recall", "macro_f1"]
              + [f"f1:{c}" for c in classes]
              + [f"precision:{c}" for c in classes]
              + [f"recall:{c}" for c in classes])
    lines = ["\t".join(header)]
    for name, rep in rows:
        cells = [name, repr(rep.accuracy), repr(rep.macro_precision),
                 repr(rep.macro_recall), repr(rep.macro_f1)]
        cells += [repr(v) for v in rep.f1]
        cells += [repr(v) for v in rep.precision]
        cells += [repr(v) for v in rep.recall]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def run_protocol(dataset, task: str, protocol: str, config,
                 held_out_event: str | None = None):
    """Train and evaluate under one of the protocols.

    ``holdout``: stratified split, train on the rest, report on the held
    10 percent (one report).  ``leave-one-out``: train on all other
    events, report on ``held_out_event``.  ``leave-one-out-all-events``:
    one report per event plus an ``aggregate`` entry, the unweighted
    mean.  Five-way tracking cannot use the leave-one-out protocols: the
    held-out event's class never occurs in training.
    """
    from vroc import training

    if protocol not in ("holdout", "leave-one-out", "leave-one-out-all-events"):
        raise ValueError(
            f"run_protocol: unknown protocol {protocol!r}; expected holdout, "
            "leave-one-out or leave-one-out-all-events"
        )
    if protocol != "holdout" and task == "tracking" and config.tracking_mode == "five-way":
        raise ValueError(
            "run_protocol: leave-one-out is incompatible with five-way tracking: "
            "the held-out event is one of the five classes, so it would never "
            "be seen in training; use the holdout protocol for five-way tracking"
        )
    return training.run_protocol_impl(dataset, task, protocol, config, held_out_event)

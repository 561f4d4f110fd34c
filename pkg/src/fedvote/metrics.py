"""Confusion matrices, the accuracy/precision/recall/F1 suite, and reports.

Multi-class metrics are macro-averaged (unweighted mean over classes). A
class whose precision or recall has a zero denominator contributes 0 by
convention and is listed in the report's degenerate_classes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LabelSpace

__all__ = [
    "ConfusionMatrix",
    "MetricsReport",
    "confusion",
    "report",
    "render_table",
    "confusion_to_csv",
    "write_confusion_csv",
    "report_to_dict",
    "report_from_dict",
    "write_report_json",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[t][p] = samples of true class t predicted as class p."""

    counts: np.ndarray
    label_space: LabelSpace

    def __post_init__(self):
        counts = np.ascontiguousarray(np.asarray(self.counts, dtype=np.int64))
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        n = self.label_space.num_classes
        if counts.shape != (n, n):
            raise ValueError(f"counts must be {n}x{n}, got {counts.shape}")
        if counts.size and counts.min() < 0:
            raise ValueError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MetricsReport:
    """Accuracy, macro and per-class precision/recall/F1, and mean loss."""

    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class_precision: tuple[float, ...]
    per_class_recall: tuple[float, ...]
    per_class_f1: tuple[float, ...]
    mean_loss: float
    class_names: tuple[str, ...]
    empty: bool = False
    degenerate_classes: tuple[str, ...] = field(default_factory=tuple)


def confusion(true_labels, predicted_labels, label_space: LabelSpace) -> ConfusionMatrix:
    """Tally an N x N confusion matrix from parallel label sequences."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError(
            f"label sequences must be equal-length 1-D, got {t.shape} and {p.shape}"
        )
    n = label_space.num_classes
    if t.size and (t.min() < 0 or t.max() >= n or p.min() < 0 or p.max() >= n):
        raise ValueError(f"labels must lie in [0, {n})")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts, label_space)


def report(cm: ConfusionMatrix, mean_loss: float = 0.0) -> MetricsReport:
    """Derive the metric suite from a confusion matrix.

    Zero-denominator precision/recall are 0 by convention; those classes are
    flagged. An all-zero matrix yields an all-zero report with empty=True.
    """
    n = cm.label_space.num_classes
    names = cm.label_space.class_names
    counts = cm.counts
    total = cm.total
    tp = np.diag(counts).astype(np.float64)
    pred_totals = counts.sum(axis=0).astype(np.float64)
    true_totals = counts.sum(axis=1).astype(np.float64)

    precision = np.divide(tp, pred_totals, out=np.zeros(n), where=pred_totals > 0)
    recall = np.divide(tp, true_totals, out=np.zeros(n), where=true_totals > 0)
    pr_sum = precision + recall
    f1 = np.divide(2 * precision * recall, pr_sum, out=np.zeros(n), where=pr_sum > 0)
    degenerate = tuple(
        names[k] for k in range(n) if pred_totals[k] == 0 or true_totals[k] == 0
    )
    accuracy = float(tp.sum() / total) if total else 0.0
    return MetricsReport(
        accuracy=accuracy,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        per_class_precision=tuple(float(v) for v in precision),
        per_class_recall=tuple(float(v) for v in recall),
        per_class_f1=tuple(float(v) for v in f1),
        mean_loss=float(mean_loss),
        class_names=names,
        empty=total == 0,
        degenerate_classes=degenerate,
    )


TABLE_COLUMNS = (
    "Precision (%)",
    "Recall (%)",
    "F1-Score (%)",
    "Training Accuracy (%)",
    "Training loss",
    "Validation Accuracy (%)",
    "Validation loss",
)


def render_table(rows: Sequence[tuple[str, MetricsReport, MetricsReport]]) -> str:
    """Fixed-column text table over (name, train report, validation report) rows.

    Precision/Recall/F1 come from the validation report. Metric cells are
    value*100 to two decimals; loss cells are the raw loss to two decimals.
    Rendering is byte-deterministic for equal inputs.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("render_table needs at least one row")
    body = []
    for name, train_rep, val_rep in rows:
        body.append(
            (
                str(name),
                f"{val_rep.macro_precision * 100:.2f}",
                f"{val_rep.macro_recall * 100:.2f}",
                f"{val_rep.macro_f1 * 100:.2f}",
                f"{train_rep.accuracy * 100:.2f}",
                f"{train_rep.mean_loss:.2f}",
                f"{val_rep.accuracy * 100:.2f}",
                f"{val_rep.mean_loss:.2f}",
            )
        )
    headers = ("Algorithm", *TABLE_COLUMNS)
    widths = [
        max(len(headers[c]), *(len(r[c]) for r in body)) for c in range(len(headers))
    ]
    lines = []
    header_cells = [headers[0].ljust(widths[0])] + [
        headers[c].rjust(widths[c]) for c in range(1, len(headers))
    ]
    lines.append("  ".join(header_cells).rstrip())
    lines.append("-" * len(lines[0]))
    for r in body:
        cells = [r[0].ljust(widths[0])] + [
            r[c].rjust(widths[c]) for c in range(1, len(headers))
        ]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def confusion_to_csv(cm: ConfusionMatrix) -> str:
    """CSV with a header row and leading column of class names."""
    names = cm.label_space.class_names
    lines = ["," + ",".join(names)]
    for k, name in enumerate(names):
        lines.append(name + "," + ",".join(str(int(v)) for v in cm.counts[k]))
    return "\n".join(lines) + "\n"


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    Path(path).write_text(confusion_to_csv(cm))


def report_to_dict(rep: MetricsReport) -> dict:
    return {
        "accuracy": rep.accuracy,
        "macro_precision": rep.macro_precision,
        "macro_recall": rep.macro_recall,
        "macro_f1": rep.macro_f1,
        "mean_loss": rep.mean_loss,
        "per_class": {
            name: {
                "precision": rep.per_class_precision[k],
                "recall": rep.per_class_recall[k],
                "f1": rep.per_class_f1[k],
            }
            for k, name in enumerate(rep.class_names)
        },
        "empty": rep.empty,
        "degenerate_classes": list(rep.degenerate_classes),
    }


def report_from_dict(payload: dict) -> MetricsReport:
    names = tuple(payload["per_class"].keys())
    per_class = payload["per_class"]
    return MetricsReport(
        accuracy=float(payload["accuracy"]),
        macro_precision=float(payload["macro_precision"]),
        macro_recall=float(payload["macro_recall"]),
        macro_f1=float(payload["macro_f1"]),
        per_class_precision=tuple(float(per_class[n]["precision"]) for n in names),
        per_class_recall=tuple(float(per_class[n]["recall"]) for n in names),
        per_class_f1=tuple(float(per_class[n]["f1"]) for n in names),
        mean_loss=float(payload["mean_loss"]),
        class_names=names,
        empty=bool(payload["empty"]),
        degenerate_classes=tuple(payload["degenerate_classes"]),
    )


def write_report_json(rep: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report_to_dict(rep), indent=2) + "\n")

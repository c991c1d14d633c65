"""Confusion-matrix metrics and the per-class classification report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from tractokit.errors import InvalidInputError


@dataclass
class Metrics:
    """All percentages are in [0, 100].

    ``classes`` lists the labels that enter the macro average: those present in
    the ground truth or in the predictions. Classes with zero support or zero
    predictions get F1 = 0 and are listed in ``degenerate``.
    """

    confusion: np.ndarray  # (C, C) rows = truth, cols = prediction
    accuracy: float
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    classes: np.ndarray
    degenerate: np.ndarray

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise InvalidInputError("y_true and y_pred differ in length")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= n_classes):
        raise InvalidInputError(f"labels must lie in [0, {n_classes - 1}]")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise InvalidInputError("cannot compute metrics on an empty split")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    classes = np.flatnonzero((support > 0) | (predicted > 0))
    degenerate = np.flatnonzero(((support == 0) | (predicted == 0)) & ((support > 0) | (predicted > 0)))
    return Metrics(
        confusion=cm,
        accuracy=100.0 * tp.sum() / total,
        macro_f1=100.0 * f1[classes].mean(),
        precision=100.0 * precision,
        recall=100.0 * recall,
        f1=100.0 * f1,
        support=support,
        classes=classes,
        degenerate=degenerate,
    )


def compute_metrics(y_true, y_pred, n_classes: int = 43) -> Metrics:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, n_classes))


REPORT_FIELDS = ("class", "name", "precision", "recall", "f1", "support", "flag")


def report_rows(m: Metrics, label_names=None, all_classes: bool = False) -> list:
    """Per-class rows followed by the macro and weighted aggregates."""
    n = m.confusion.shape[0]
    names = list(label_names) if label_names is not None else [str(i) for i in range(n)]
    classes = range(n) if all_classes else m.classes
    degenerate = set(m.degenerate.tolist()) | {c for c in range(n) if m.support[c] == 0}
    rows = []
    for c in classes:
        rows.append({
            "class": str(c), "name": names[c], "precision": float(m.precision[c]), "recall": float(m.recall[c]),
            "f1": float(m.f1[c]), "support": int(m.support[c]), "flag": "*" if c in degenerate else "",
        })
    sel = np.asarray(list(classes), dtype=np.int64)
    w = m.support[sel] / max(m.support[sel].sum(), 1)
    rows.append({
        "class": "macro", "name": "macro avg", "precision": float(m.precision[sel].mean()),
        "recall": float(m.recall[sel].mean()), "f1": float(m.f1[sel].mean()),
        "support": int(m.support[sel].sum()), "flag": "",
    })
    rows.append({
        "class": "weighted", "name": "weighted avg", "precision": float(w @ m.precision[sel]),
        "recall": float(w @ m.recall[sel]), "f1": float(w @ m.f1[sel]), "support": int(m.support[sel].sum()),
        "flag": "",
    })
    return rows


def classification_report(m: Metrics, label_names=None, all_classes: bool = False) -> tuple[str, str]:
    """(fixed-width text, CSV) renderings of the per-class report."""
    rows = report_rows(m, label_names, all_classes)
    width = max(12, max(len(r["name"]) for r in rows))
    lines = [f"{'name':<{width}} {'precision':>9} {'recall':>9} {'f1':>9} {'support':>8}"]
    for r in rows:
        if r["class"] == "macro":
            lines.append("")
        lines.append(
            f"{r['name']:<{width}} {r['precision']:9.2f} {r['recall']:9.2f} {r['f1']:9.2f} {r['support']:8d}{r['flag']}"
        )
    lines.append("")
    lines.append(f"accuracy {m.accuracy:.3f}  macro-F1 {m.macro_f1:.3f}  n={m.total}")
    if any(r["flag"] for r in rows):
        lines.append("* F1 set to 0: class has no support or no predictions")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({**r, **{k: repr(r[k]) for k in ("precision", "recall", "f1")}})
    return "\n".join(lines) + "\n", buf.getvalue()


def load_report_csv(text: str) -> list:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({
            "class": r["class"], "name": r["name"], "precision": float(r["precision"]),
            "recall": float(r["recall"]), "f1": float(r["f1"]), "support": int(r["support"]), "flag": r["flag"],
        })
    return rows

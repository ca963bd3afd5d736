"""Confusion matrices and the class-averaged F1 score."""
from __future__ import annotations

import csv
import io

import numpy as np

from .errors import ShapeError, ValidationError


def confusion(predictions, actuals, num_classes: int) -> np.ndarray:
    """K x K counts, rows = actual class, columns = predicted class."""
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    act = np.asarray(actuals, dtype=np.int64).ravel()
    if pred.shape != act.shape:
        raise ShapeError(f"confusion: {pred.size} predictions vs {act.size} labels")
    for name, arr in (("prediction", pred), ("label", act)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValidationError(f"confusion: {name} out of range for K={num_classes}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (act, pred), 1)
    return cm


def f_avg(cm: np.ndarray) -> float:
    """Average F1 over classes: ``(2/K) * sum_c r_c*p_c / (r_c + p_c)``.

    A class whose recall or precision is undefined (empty row or column)
    or whose recall and precision are both zero contributes 0.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise ShapeError(f"f_avg: need a square matrix with K >= 2, got {cm.shape}")
    if cm.sum() == 0:
        raise ValidationError("f_avg: confusion matrix is empty")
    k = cm.shape[0]
    diag = np.diag(cm).astype(np.float64)
    rows = cm.sum(axis=1).astype(np.float64)
    cols = cm.sum(axis=0).astype(np.float64)
    total = 0.0
    for c in range(k):
        if rows[c] == 0 or cols[c] == 0:
            continue
        r = diag[c] / rows[c]
        p = diag[c] / cols[c]
        if r + p == 0:
            continue
        total += r * p / (r + p)
    return float(2.0 * total / k)


def f_avg_from_probs(probs: np.ndarray, labels, num_classes: int | None = None) -> float:
    probs = np.asarray(probs)
    k = probs.shape[1] if num_classes is None else num_classes
    return f_avg(confusion(probs.argmax(axis=1), labels, k))


def confusion_csv(cm: np.ndarray, class_names=None) -> str:
    k = cm.shape[0]
    names = list(class_names) if class_names else [str(i) for i in range(k)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["actual\\predicted", *names])
    for i in range(k):
        w.writerow([names[i], *[int(v) for v in cm[i]]])
    return buf.getvalue()


def render_confusion(cm: np.ndarray, class_names=None) -> str:
    """Plain-text grid of the matrix."""
    k = cm.shape[0]
    names = [str(n) for n in class_names] if class_names else [str(i) for i in range(k)]
    width = max(max(len(n) for n in names), len(str(int(cm.max()))) if cm.size else 1) + 1
    lines = [" " * width + "".join(n.rjust(width) for n in names)]
    for i in range(k):
        lines.append(names[i].rjust(width) + "".join(str(int(v)).rjust(width) for v in cm[i]))
    return "\n".join(lines)

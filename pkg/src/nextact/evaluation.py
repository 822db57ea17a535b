"""Accuracy, confusion matrices and confusion-matrix entropy."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class LengthMismatchError(ValueError):
    pass


class UnknownClassError(ValueError):
    pass


class AllZeroError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[true, predicted]``."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(predictions, labels, class_names: Sequence[str]) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise LengthMismatchError(
            f"{predictions.size} predictions for {labels.size} labels")
    C = len(class_names)
    for arr in (predictions, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= C):
            raise UnknownClassError(f"class index outside 0..{C - 1}")
    counts = np.zeros((C, C), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts, tuple(class_names))


def row_normalize(cm: ConfusionMatrix | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic matrix plus a boolean flag per row with zero support."""
    counts = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=float)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ValueError("confusion matrix must be square")
    support = counts.sum(axis=1)
    empty = support == 0
    out = np.zeros_like(counts)
    out[~empty] = counts[~empty] / support[~empty, None]
    return out, empty


def _row_entropy(p: np.ndarray, log) -> float:
    p = p[p > 0]
    return float(-np.sum(p * log(p)))


def cm_entropy(cm: ConfusionMatrix | np.ndarray, base=2, weighted: bool = True) -> float:
    """Mean Shannon entropy of the row-normalised rows.

    Rows are weighted by their support when ``weighted`` (the default),
    otherwise every non-empty row counts equally. Empty rows are skipped.
    """
    counts = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=float)
    norm, empty = row_normalize(counts)
    if empty.all():
        raise AllZeroError("confusion matrix has no samples")
    log = np.log2 if base in (2, "2") else np.log
    support = counts.sum(axis=1)
    rows = np.flatnonzero(~empty)
    h = np.array([_row_entropy(norm[r], log) for r in rows])
    w = support[rows] / support[rows].sum() if weighted else np.full(rows.size, 1 / rows.size)
    return float(np.dot(w, h))


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    cm: ConfusionMatrix
    cm_normalized: np.ndarray
    cm_entropy: float
    cm_entropy_unweighted: float
    log_base: str

    def to_dict(self) -> dict:
        names = list(self.cm.class_names)
        return {
            "accuracy": self.accuracy,
            "n_samples": self.cm.total,
            "log_base": self.log_base,
            "cm_entropy": self.cm_entropy,
            "cm_entropy_unweighted": self.cm_entropy_unweighted,
            "per_class": {
                name: {"precision": float(p), "recall": float(r),
                       "support": int(s)}
                for name, p, r, s in zip(names, self.precision, self.recall,
                                         self.cm.counts.sum(axis=1))
            },
            "class_names": names,
            "confusion_matrix": self.cm.counts.tolist(),
            "confusion_matrix_normalized": self.cm_normalized.tolist(),
        }


def evaluate(predictions, labels, class_names: Sequence[str], base=2) -> EvalReport:
    cm = confusion_matrix(predictions, labels, class_names)
    counts = cm.counts
    if cm.total == 0:
        raise AllZeroError("nothing to evaluate")
    tp = np.diag(counts).astype(float)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
    norm, _ = row_normalize(cm)
    return EvalReport(
        accuracy=float(tp.sum() / cm.total),
        precision=precision,
        recall=recall,
        cm=cm,
        cm_normalized=norm,
        cm_entropy=cm_entropy(cm, base),
        cm_entropy_unweighted=cm_entropy(cm, base, weighted=False),
        log_base="2" if base in (2, "2") else "e",
    )


def matrix_csv(cm: ConfusionMatrix, normalized: bool = False) -> str:
    data = row_normalize(cm)[0] if normalized else cm.counts
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred"] + list(cm.class_names))
    for name, row in zip(cm.class_names, data):
        writer.writerow([name] + [f"{v:.6f}" if normalized else int(v) for v in row])
    return buf.getvalue()


_SHADES = " .:-=+*#%@"


def heat_table(cm: ConfusionMatrix, width: int = 10) -> str:
    """Row-normalised matrix as a plain-text table with a shade glyph per cell."""
    norm, empty = row_normalize(cm)
    names = [n[:width] for n in cm.class_names]
    lines = [" " * (width + 1) + " ".join(f"{n:>{width}}" for n in names)]
    for i, name in enumerate(names):
        cells = []
        for v in norm[i]:
            glyph = _SHADES[min(len(_SHADES) - 1, int(math.floor(v * (len(_SHADES) - 1) + 0.5)))]
            cells.append(f"{v:>{width - 2}.2f} {glyph}")
        suffix = "  (no support)" if empty[i] else ""
        lines.append(f"{name:>{width}} " + " ".join(cells) + suffix)
    return "\n".join(lines)

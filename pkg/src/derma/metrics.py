"""Evaluation metrics: Dice/IoU for masks, accuracy/top-2/AUC/confusion for classes."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def dice_iou_metrics(pred, truth, threshold: float = 0.5) -> tuple[float, float]:
    """Dice and IoU of thresholded ``pred`` against binary ``truth``; two empty masks score 1.0."""
    a = np.asarray(pred, dtype=float) >= threshold
    b = np.asarray(truth, dtype=float) >= 0.5
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a, b).sum())
    total = int(a.sum()) + int(b.sum())
    union = int(np.logical_or(a, b).sum())
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / union


@dataclass
class SegMetricAccumulator:
    """Per-image Dice/IoU, averaged over the dataset on ``result()``."""

    dice: list[float] = field(default_factory=list)
    iou: list[float] = field(default_factory=list)

    def update(self, preds, truths, threshold: float = 0.5) -> None:
        for p, t in zip(preds, truths):
            d, i = dice_iou_metrics(p, t, threshold)
            self.dice.append(d)
            self.iou.append(i)

    def merge(self, other: "SegMetricAccumulator") -> "SegMetricAccumulator":
        return SegMetricAccumulator(self.dice + other.dice, self.iou + other.iou)

    def result(self) -> tuple[float, float]:
        if not self.dice:
            raise ValueError("no images were evaluated")
        return float(np.mean(self.dice)), float(np.mean(self.iou))


def top_k_hits(scores: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """True where the label is among the k highest scores; ties go to the lower class index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return (order[:, :k] == labels[:, None]).any(axis=1)


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    # Mann-Whitney U with mid-ranks, so ties count one half
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=float)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_ovr(scores, labels) -> float:
    """Macro one-vs-rest ROC AUC.

    Classes without both positives and negatives are skipped with a warning;
    if no class qualifies a ValueError is raised. A 1-D ``scores`` array is
    treated as the positive-class score of a binary problem.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.ndim == 1:
        positive = labels == 1
        if positive.all() or not positive.any():
            raise ValueError("binary AUC needs both positive and negative samples")
        return _binary_auc(scores, positive)
    per_class, skipped = [], []
    for c in range(scores.shape[1]):
        positive = labels == c
        if positive.all() or not positive.any():
            skipped.append(c)
            continue
        per_class.append(_binary_auc(scores[:, c], positive))
    if skipped:
        warnings.warn(f"AUC skipped classes lacking positives or negatives: {skipped}", stacklevel=2)
    if not per_class:
        raise ValueError("no class has both positive and negative samples")
    return float(np.mean(per_class))


@dataclass
class MetricReport:
    accuracy: float
    top2_accuracy: float
    auc: float | None
    precision: list[float]
    recall: list[float]
    confusion: np.ndarray
    class_names: list[str]

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("accuracy", "", self.accuracy), ("top2_accuracy", "", self.top2_accuracy)]
        if self.auc is not None:
            out.append(("auc_macro_ovr", "", self.auc))
        out += [("precision", n, p) for n, p in zip(self.class_names, self.precision)]
        out += [("recall", n, r) for n, r in zip(self.class_names, self.recall)]
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "name", "value"])
            for metric, name, value in self.rows():
                w.writerow([metric, name, repr(float(value))])

    def write_confusion_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + self.class_names)
            for name, row in zip(self.class_names, self.confusion):
                w.writerow([name] + [int(v) for v in row])


def classification_metrics(logits, labels, class_names: list[str] | None = None) -> MetricReport:
    scores = np.asarray(logits, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.ndim != 2 or len(scores) < 1:
        raise ValueError("logits must be a non-empty (B, C) array")
    n_classes = scores.shape[1]
    names = list(class_names) if class_names else [str(c) for c in range(n_classes)]
    order = np.argsort(-scores, axis=1, kind="stable")
    pred = order[:, 0]
    cm = confusion_matrix(labels, pred, n_classes)
    accuracy = float(np.trace(cm)) / float(cm.sum())
    top2 = float(top_k_hits(scores, labels, min(2, n_classes)).mean())
    col, row = cm.sum(axis=0), cm.sum(axis=1)
    diag = np.diag(cm).astype(float)
    precision = [float(d / c) if c else 0.0 for d, c in zip(diag, col)]
    recall = [float(d / r) if r else 0.0 for d, r in zip(diag, row)]
    shifted = scores - scores.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            auc = auc_ovr(probs, labels)
    except ValueError:
        auc = None
    return MetricReport(accuracy, top2, auc, precision, recall, cm, names)

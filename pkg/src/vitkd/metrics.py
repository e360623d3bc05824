"""Classification metrics: accuracy, confusion counts, rank-based AUROC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SingleClassError(Exception):
    """AUROC is undefined unless both classes are present."""


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    preds = np.argmax(logits, axis=-1)
    return float(np.sum(preds == labels)) / len(labels)


def confusion_counts(logits: np.ndarray, labels: np.ndarray,
                     num_classes: int) -> list[list[int]]:
    preds = np.argmax(logits, axis=-1)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return counts.tolist()


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random positive outscores a random negative, ties
    counted one half.

    Computed by the rank method with average ranks over tie groups; the
    numerator is accumulated in exact integer arithmetic (doubled ranks), so
    the result agrees bit-for-bit with the quadratic pairwise definition.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUROC needs both a positive and a negative sample")

    order = np.argsort(scores, kind="stable")
    s = scores[order]
    pos = (labels[order] == 1).astype(np.int64)

    two_sum = 0  # twice the summed average ranks of positives (exact integer)
    i, n = 0, len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        two_sum += (i + 1 + j) * int(pos[i:j].sum())  # ranks i+1..j share (i+1+j)/2
        i = j
    numerator = two_sum - n_pos * (n_pos + 1)
    return numerator / (2 * n_pos * n_neg)


@dataclass
class MetricsReport:
    accuracy: float
    auroc: float | None
    loss_curve: list[float] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "auroc": self.auroc,
                "loss_curve": self.loss_curve, "confusion": self.confusion}


def evaluate_scores(logits: np.ndarray, labels: np.ndarray,
                    num_classes: int) -> MetricsReport:
    """Accuracy/confusion for any class count; AUROC for the binary case only
    (softmax probability of class 1), None otherwise."""
    probs = softmax_rows(logits)
    roc = None
    if num_classes == 2 and len(set(labels.tolist())) == 2:
        roc = auroc(probs[:, 1], labels)
    return MetricsReport(accuracy=accuracy(logits, labels), auroc=roc,
                         confusion=confusion_counts(logits, labels, num_classes))

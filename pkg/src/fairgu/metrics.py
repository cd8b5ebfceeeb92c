"""Group-fairness and utility metrics.

Hard metrics (demographic-parity and equal-opportunity gaps, accuracy, F1)
are used for evaluation; the soft group gap is the differentiable surrogate
used inside training losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGroupError, ValidationError

REPORT_COLUMNS = ("method", "r_n", "r_e", "seed", "accuracy", "f1", "delta_dp", "delta_eo")


@dataclass(frozen=True)
class FairnessReport:
    delta_dp: float
    delta_eo: float
    accuracy: float
    f1: float
    group_sizes: np.ndarray  # (2, 2) counts indexed by [sensitive, label]

    def csv_row(self, method: str, r_n: float, r_e: float, seed: int) -> list[str]:
        return [method, f"{r_n:g}", f"{r_e:g}", str(seed),
                f"{self.accuracy:.6f}", f"{self.f1:.6f}",
                f"{self.delta_dp:.6f}", f"{self.delta_eo:.6f}"]


def _group_masks(sensitive, mask):
    mask = np.asarray(mask, dtype=bool)
    return mask & (sensitive == 0), mask & (sensitive == 1)


def delta_dp(hard_labels, sensitive, mask) -> float:
    """|P(Yhat=1 | S=0) - P(Yhat=1 | S=1)| from empirical frequencies."""
    m0, m1 = _group_masks(sensitive, mask)
    if not m0.any() or not m1.any():
        raise DegenerateGroupError("a sensitive group is empty within the mask")
    return abs(float(np.mean(hard_labels[m0])) - float(np.mean(hard_labels[m1])))


def delta_eo(hard_labels, true_labels, sensitive, mask) -> float:
    """|P(Yhat=1 | S=0, Y=1) - P(Yhat=1 | S=1, Y=1)|."""
    positive = np.asarray(mask, dtype=bool) & (true_labels == 1)
    m0, m1 = _group_masks(sensitive, positive)
    if not m0.any() or not m1.any():
        raise DegenerateGroupError("a (sensitive, Y=1) cell is empty within the mask")
    return abs(float(np.mean(hard_labels[m0])) - float(np.mean(hard_labels[m1])))


def soft_group_gap(probs, sensitive, mask):
    """Absolute gap between group means of soft probabilities, with its
    gradient w.r.t. each probability. Empty groups yield (0, zero grad);
    sign(0) is taken as 0, so the gradient vanishes wherever the gap does.
    """
    m0, m1 = _group_masks(sensitive, mask)
    grad = np.zeros(len(probs))
    n0, n1 = int(m0.sum()), int(m1.sum())
    if n0 == 0 or n1 == 0:
        return 0.0, grad
    gap = float(np.mean(probs[m0])) - float(np.mean(probs[m1]))
    s = float(np.sign(gap))
    grad[m0] = s / n0
    grad[m1] = -s / n1
    return abs(gap), grad


def accuracy_f1(hard_labels, true_labels, mask):
    """Accuracy and binary F1 on the positive class; F1 is 0 whenever
    precision + recall is 0.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValidationError("accuracy_f1 needs a non-empty mask")
    yhat = np.asarray(hard_labels)[mask]
    y = np.asarray(true_labels)[mask]
    accuracy = float(np.mean(yhat == y))
    tp = int(np.sum((yhat == 1) & (y == 1)))
    fp = int(np.sum((yhat == 1) & (y == 0)))
    fn = int(np.sum((yhat == 0) & (y == 1)))
    if 2 * tp + fp + fn == 0:
        return accuracy, 0.0
    return accuracy, 2.0 * tp / (2 * tp + fp + fn)


def evaluate_predictions(graph, probs, mask=None) -> FairnessReport:
    """Build a FairnessReport from soft predictions on a graph, thresholding
    at 0.5 (ties map to 1). Defaults to the test split; raises on degenerate
    groups, matching the evaluation contract.
    """
    if mask is None:
        mask = graph.mask("test")
    mask = np.asarray(mask, dtype=bool)
    hard = (np.asarray(probs) >= 0.5).astype(np.int8)
    acc, f1 = accuracy_f1(hard, graph.labels, mask)
    dp = delta_dp(hard, graph.sensitive, mask)
    eo = delta_eo(hard, graph.labels, graph.sensitive, mask)
    sizes = np.zeros((2, 2), dtype=np.int64)
    for s in (0, 1):
        for y in (0, 1):
            sizes[s, y] = int(np.sum(mask & (graph.sensitive == s) & (graph.labels == y)))
    return FairnessReport(dp, eo, acc, f1, sizes)

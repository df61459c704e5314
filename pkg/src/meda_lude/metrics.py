"""Multiclass evaluation for imbalanced problems.

Predictions are score argmaxes (ties go to the lowest class index); every
per-class figure is one-vs-rest, macro scores average the per-class ones,
and 0/0 ratios are defined as 0. The geometric mean score defaults to
sqrt(macro recall x macro specificity) with a per-class-recall variant
behind a switch. AUC is computed two ways on purpose: ``evaluate`` walks
the ROC curve with trapezoids while :func:`auc_ovr` counts concordant
pairs (Mann-Whitney); the two must agree and tests hold them to it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError, UndefinedAUCError

logger = logging.getLogger(__name__)

G_MEAN_VARIANTS = ("macro_specificity", "recall_geomean")


@dataclass
class EvalReport:
    """Confusion matrix plus per-class and macro-averaged scores."""

    confusion: np.ndarray
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_specificity: np.ndarray
    per_class_f1: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_specificity: float
    macro_f1: float
    g_mean: float
    auc: float

    def row(self) -> dict[str, float]:
        """Flat scalar view used for CSV rows."""
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_specificity": self.macro_specificity,
            "macro_f1": self.macro_f1,
            "g_mean": self.g_mean,
            "auc": self.auc,
        }


def _check_scores(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0 or scores.shape[1] < 2:
        raise ShapeError(
            f"scores must be (n >= 1, K >= 2), got shape {scores.shape}"
        )
    if not np.all(np.isfinite(scores)):
        raise InputError("scores contain non-finite values")
    return scores


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 is defined as 0.
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def auc_ovr(scores: np.ndarray, positives: np.ndarray) -> float:
    """One-vs-rest AUC of a score vector: P(s_pos > s_neg) + 0.5 P(equal).

    Computed from average ranks, which matches brute-force pair counting
    exactly (rank sums stay integer-or-half valued).

    Raises:
        UndefinedAUCError: if either class is empty.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.ndim != 1 or scores.shape != positives.shape:
        raise ShapeError(
            f"scores {scores.shape} and positives {positives.shape} must be "
            "matching vectors"
        )
    if not np.all(np.isfinite(scores)):
        raise InputError("scores contain non-finite values")
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(
            f"need both classes, got {n_pos} positives / {n_neg} negatives"
        )
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # 1-based average rank of the tie group [i, j].
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = float(ranks[positives].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _trapezoid_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """ROC area by trapezoids over descending score thresholds."""
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(
            f"need both classes, got {n_pos} positives / {n_neg} negatives"
        )
    order = np.argsort(-scores, kind="stable")
    sorted_pos = positives[order]
    sorted_scores = scores[order]
    tp = fp = 0
    prev_tpr = prev_fpr = 0.0
    area = 0.0
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        group_pos = int(sorted_pos[i : j + 1].sum())
        tp += group_pos
        fp += (j - i + 1) - group_pos
        tpr = tp / n_pos
        fpr = fp / n_neg
        area += 0.5 * (fpr - prev_fpr) * (tpr + prev_tpr)
        prev_tpr, prev_fpr = tpr, fpr
        i = j + 1
    return area


def evaluate(
    scores: np.ndarray,
    labels: np.ndarray,
    g_mean_variant: str = "macro_specificity",
) -> EvalReport:
    """Score a multiclass prediction matrix against integer labels.

    Args:
        scores: (n, K) class scores; row argmax is the prediction with ties
            resolved toward the lowest class index.
        labels: (n,) integer labels in [0, K).
        g_mean_variant: "macro_specificity" for
            sqrt(macro_recall * macro_specificity), "recall_geomean" for the
            geometric mean of per-class recalls.

    Returns:
        Filled :class:`EvalReport`. Classes with no positives or no
        negatives are left out of the AUC average with a log note.

    Raises:
        UndefinedAUCError: when no class has both positives and negatives.
    """
    scores = _check_scores(scores)
    n, class_count = scores.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"labels must be ({n},), got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= class_count:
        raise InputError(
            f"labels must lie in [0, {class_count}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    if g_mean_variant not in G_MEAN_VARIANTS:
        raise InputError(
            f"g_mean_variant must be one of {G_MEAN_VARIANTS}, got "
            f"{g_mean_variant!r}"
        )

    predictions = np.argmax(scores, axis=1)
    confusion = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)

    tp = np.diag(confusion).astype(np.float64)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp
    tn = n - tp - fn - fp
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)
    f1 = _ratio(2.0 * precision * recall, precision + recall)

    macro_recall = float(recall.mean())
    macro_specificity = float(specificity.mean())
    if g_mean_variant == "macro_specificity":
        g_mean = float(np.sqrt(macro_recall * macro_specificity))
    else:
        g_mean = float(np.prod(recall) ** (1.0 / class_count))

    aucs = []
    for k in range(class_count):
        pos = labels == k
        if not pos.any() or pos.all():
            logger.info("class %d has a single side; left out of AUC", k)
            continue
        aucs.append(_trapezoid_auc(scores[:, k], pos))
    if not aucs:
        raise UndefinedAUCError("no class has both positives and negatives")

    return EvalReport(
        confusion=confusion,
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_specificity=specificity,
        per_class_f1=f1,
        accuracy=float(tp.sum() / n),
        macro_precision=float(precision.mean()),
        macro_recall=macro_recall,
        macro_specificity=macro_specificity,
        macro_f1=float(f1.mean()),
        g_mean=g_mean,
        auc=float(np.mean(aucs)),
    )

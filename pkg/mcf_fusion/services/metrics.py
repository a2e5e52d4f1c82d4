"""Evaluation measures: average precision / mAP, accuracy, macro-F1, AVD error."""

from typing import Optional

import numpy as np
import structlog

from mcf_fusion.core.errors import DimensionError, LabelError

logger = structlog.get_logger(__name__)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Step-wise AP: sum over positive ranks of (R_k − R_{k−1}) · P_k.

    Ranking is a stable sort by descending score, so ties keep their
    original order. Returns None when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DimensionError(
            f"scores ({scores.size}) and labels ({labels.size}) differ in length",
            scores.shape, labels.shape,
        )
    positives = int((labels == 1).sum())
    if positives == 0:
        return None

    order = np.argsort(-scores, kind="stable")
    hits = (labels[order] == 1).astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float((precision * hits).sum() / positives)


def per_class_ap(scores: np.ndarray, labels: np.ndarray) -> list[Optional[float]]:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise DimensionError(
            f"expected matching samples×classes matrices, got {scores.shape} and {labels.shape}",
            scores.shape, labels.shape,
        )
    return [average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1])]


def mean_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean AP over classes that have at least one positive."""
    defined = [ap for ap in per_class_ap(scores, labels) if ap is not None]
    if not defined:
        logger.warning("No class has a positive label; mAP reported as 0")
        return 0.0
    return float(np.mean(defined))


def classification_metrics(
    pred: np.ndarray, truth: np.ndarray, n_disc: int
) -> tuple[float, float]:
    """(accuracy, macro-F1); a class with no predictions and no instances scores F1 = 0."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise DimensionError("pred and truth differ in length", pred.shape, truth.shape)
    for name, values in (("pred", pred), ("truth", truth)):
        if values.size and (values.min() < 0 or values.max() >= n_disc):
            raise LabelError(f"{name} has class indices outside [0, {n_disc})")
    if pred.size == 0:
        return 0.0, 0.0

    accuracy = float((pred == truth).mean())
    confusion = np.zeros((n_disc, n_disc), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    denom = confusion.sum(axis=0) + confusion.sum(axis=1)  # 2TP + FP + FN
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(n_disc), where=denom > 0)
    return accuracy, float(f1.mean())


def avd_error(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-dimension mean squared error."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"AVD shapes differ: {pred.shape} vs {truth.shape}", pred.shape, truth.shape)
    if pred.shape[0] == 0:
        return np.zeros(pred.shape[-1])
    return ((pred - truth) ** 2).mean(axis=0)

"""Training objectives: weighted BCE + MSE for multilabel/AVD, cross-entropy for single label.

Losses are evaluated in float64 and returned in the logits' dtype; each owns
the output nonlinearity (sigmoid or softmax) so head outputs stay raw logits.
"""

from typing import Optional

import numpy as np

from mcf_fusion.api.dto import McfConfig, Task
from mcf_fusion.core.errors import DimensionError, LabelError, UsageError
from mcf_fusion.nn import ops
from mcf_fusion.nn.tensor import Tensor, make_node

PROB_CLAMP = 1e-7


def _check_same_shape(pred: Tensor, target: np.ndarray, what: str) -> None:
    if pred.shape != target.shape:
        raise DimensionError(
            f"{what}: prediction {pred.shape} and target {target.shape} differ",
            pred.shape, target.shape,
        )


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE of sigmoid(logits) against {0,1} targets, probabilities clamped."""
    targets = np.asarray(targets)
    _check_same_shape(logits, targets, "binary_cross_entropy")
    if not np.isin(targets, (0, 1)).all():
        raise LabelError("discrete targets must be 0 or 1")

    z = logits.data.astype(np.float64)
    y = targets.astype(np.float64)
    raw = ops.sigmoid_array(z)
    p = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = max(z.size, 1)
    value = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / n
    # d/dz of the clamped loss; zero where the clamp is active.
    active = (raw > PROB_CLAMP) & (raw < 1.0 - PROB_CLAMP)
    dz = np.where(active, p - y, 0.0) / n

    return make_node(
        np.asarray(value, dtype=logits.dtype),
        (logits,),
        lambda g: ((g * dz).astype(logits.dtype),),
    )


def mean_squared_error(pred: Tensor, targets: np.ndarray) -> Tensor:
    targets = np.asarray(targets, dtype=np.float64)
    _check_same_shape(pred, targets, "mean_squared_error")
    if not np.isfinite(targets).all():
        raise LabelError("continuous targets must be finite")

    diff = pred.data.astype(np.float64) - targets
    n = max(diff.size, 1)
    value = (diff * diff).sum() / n
    dpred = 2.0 * diff / n
    return make_node(
        np.asarray(value, dtype=pred.dtype),
        (pred,),
        lambda g: ((g * dpred).astype(pred.dtype),),
    )


def cross_entropy(logits: Tensor, classes: np.ndarray) -> Tensor:
    """Batch-mean −log softmax(logits)[y], max-shifted."""
    classes = np.asarray(classes)
    n_disc = logits.shape[-1]
    if classes.shape != logits.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} and classes {classes.shape} differ",
            logits.shape, classes.shape,
        )
    if classes.size and (classes.min() < 0 or classes.max() >= n_disc):
        raise LabelError(
            f"class index out of range [0, {n_disc})",
            {"min": int(classes.min()), "max": int(classes.max())},
        )

    z = logits.data.astype(np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    picked = np.take_along_axis(log_probs, classes[..., None].astype(np.int64), axis=-1)
    n = max(classes.size, 1)
    value = -picked.sum() / n

    dz = np.exp(log_probs)
    np.put_along_axis(
        dz, classes[..., None].astype(np.int64),
        np.take_along_axis(dz, classes[..., None].astype(np.int64), axis=-1) - 1.0,
        axis=-1,
    )
    dz /= n
    return make_node(
        np.asarray(value, dtype=logits.dtype),
        (logits,),
        lambda g: ((g * dz).astype(logits.dtype),),
    )


def emotic_loss(
    disc_logits: Tensor,
    cont: Optional[Tensor],
    y_disc: np.ndarray,
    y_cont: np.ndarray,
    lambda1: float,
    lambda2: float,
) -> Tensor:
    """lambda1 · BCE(disc) + lambda2 · MSE(AVD)."""
    if cont is None:
        raise UsageError("emotic_loss needs the continuous head output")
    bce = binary_cross_entropy(disc_logits, y_disc)
    mse = mean_squared_error(cont, y_cont)
    return ops.add(ops.scale(bce, lambda1), ops.scale(mse, lambda2))


def caer_loss(disc_logits: Tensor, y: np.ndarray) -> Tensor:
    return cross_entropy(disc_logits, y)


def task_loss(
    disc_logits: Tensor,
    cont: Optional[Tensor],
    labels: dict[str, np.ndarray],
    config: McfConfig,
    lambda1: float = 0.8,
    lambda2: float = 0.2,
) -> Tensor:
    """Dispatch to the objective of the model's task."""
    if config.task is Task.MULTILABEL_CONT:
        return emotic_loss(disc_logits, cont, labels["y_disc"], labels["y_cont"], lambda1, lambda2)
    return caer_loss(disc_logits, labels["y_class"])

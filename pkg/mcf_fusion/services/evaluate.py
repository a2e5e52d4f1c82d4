"""Batched inference and evaluation reports."""

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
import structlog

from mcf_fusion.api.dto import EvalReport, Task
from mcf_fusion.core.errors import DataError
from mcf_fusion.nn.ops import Mode, sigmoid_array
from mcf_fusion.nn.tensor import no_grad
from mcf_fusion.services.bundle import FeatureBundle
from mcf_fusion.services.losses import task_loss
from mcf_fusion.services.metrics import avd_error, classification_metrics, mean_ap, per_class_ap
from mcf_fusion.services.model import McfModel, mcf_forward

logger = structlog.get_logger(__name__)

EVAL_BATCH_SIZE = 64


@dataclass
class Predictions:
    disc_logits: np.ndarray
    cont: Optional[np.ndarray]
    loss: float

    def rows(self, task: Task) -> list[dict[str, Any]]:
        """Per-sample JSON-ready predictions."""
        out: list[dict[str, Any]] = []
        if task is Task.MULTILABEL_CONT:
            probs = sigmoid_array(self.disc_logits.astype(np.float64))
            for i in range(probs.shape[0]):
                row: dict[str, Any] = {"index": i, "probabilities": [float(p) for p in probs[i]]}
                if self.cont is not None:
                    row["avd"] = [float(v) for v in self.cont[i]]
                out.append(row)
            return out
        z = self.disc_logits.astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        probs = z / z.sum(axis=1, keepdims=True)
        for i in range(probs.shape[0]):
            out.append({
                "index": i,
                "class": int(np.argmax(probs[i])),
                "probabilities": [float(p) for p in probs[i]],
            })
        return out


def predict(
    model: McfModel,
    bundle: FeatureBundle,
    batch_size: int = EVAL_BATCH_SIZE,
    lambda1: float = 0.8,
    lambda2: float = 0.2,
) -> Predictions:
    """Eval-mode forward over the whole bundle; loss is the sample-weighted mean."""
    n = len(bundle)
    if n == 0:
        raise DataError("cannot evaluate an empty bundle")
    model.check_geometry(bundle.geometry)
    model.check_task(bundle.task, bundle.n_disc)

    logits, conts, total = [], [], 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            out = mcf_forward(model, bundle.batch(idx), Mode.EVAL)
            loss = task_loss(
                out.disc_logits, out.cont, bundle.labels(idx), model.config, lambda1, lambda2
            )
            total += loss.item() * idx.size
            logits.append(out.disc_logits.data)
            if out.cont is not None:
                conts.append(out.cont.data)

    return Predictions(
        disc_logits=np.concatenate(logits),
        cont=np.concatenate(conts) if conts else None,
        loss=total / n,
    )


def evaluate(
    model: McfModel,
    bundle: FeatureBundle,
    batch_size: int = EVAL_BATCH_SIZE,
    lambda1: float = 0.8,
    lambda2: float = 0.2,
) -> EvalReport:
    preds = predict(model, bundle, batch_size, lambda1, lambda2)
    n = len(bundle)

    if bundle.task is Task.MULTILABEL_CONT:
        assert bundle.y_disc is not None and bundle.y_cont is not None
        scores = sigmoid_array(preds.disc_logits.astype(np.float64))
        report = EvalReport(
            task=bundle.task,
            n_samples=n,
            loss=preds.loss,
            map=mean_ap(scores, bundle.y_disc),
            per_class_ap=per_class_ap(scores, bundle.y_disc),
            avd_mse=[float(v) for v in avd_error(preds.cont, bundle.y_cont)],
            class_counts=[int(c) for c in bundle.y_disc.sum(axis=0)],
        )
    else:
        assert bundle.y_class is not None
        truth = bundle.y_class.astype(np.int64)
        accuracy, macro_f1 = classification_metrics(
            np.argmax(preds.disc_logits, axis=1), truth, bundle.n_disc
        )
        report = EvalReport(
            task=bundle.task,
            n_samples=n,
            loss=preds.loss,
            accuracy=accuracy,
            macro_f1=macro_f1,
            class_counts=[int(c) for c in np.bincount(truth, minlength=bundle.n_disc)],
        )

    logger.debug("Evaluated", samples=n, **report.headline())
    return report


def format_report(report: EvalReport) -> str:
    """Human-readable summary, scores to 4 decimals."""
    lines = [f"samples: {report.n_samples}"]
    if report.loss is not None:
        lines.append(f"loss: {report.loss:.4f}")
    if report.map is not None:
        lines.append(f"mAP: {report.map:.4f}")
    if report.avd_mse is not None:
        lines.append("AVD MSE: " + " ".join(f"{v:.4f}" for v in report.avd_mse))
    if report.accuracy is not None:
        lines.append(f"accuracy: {report.accuracy:.4f}")
    if report.macro_f1 is not None:
        lines.append(f"macro-F1: {report.macro_f1:.4f}")
    return "\n".join(lines)

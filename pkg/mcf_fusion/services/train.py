"""The epoch loop: seeded shuffling, mini-batch updates, validation, best-state selection."""

import json
from datetime import datetime, timezone
from typing import Callable, Optional

import numpy as np
import structlog

from mcf_fusion.api.dto import EpochRecord, Task, TrainConfig, TrainHistory
from mcf_fusion.core.errors import ConfigurationError, DataError
from mcf_fusion.nn.ops import Mode
from mcf_fusion.nn.tensor import RngState
from mcf_fusion.services.bundle import FeatureBundle
from mcf_fusion.services.evaluate import evaluate
from mcf_fusion.services.losses import task_loss
from mcf_fusion.services.model import McfModel, mcf_forward
from mcf_fusion.services.optim import build_optimizer, exp_schedule

logger = structlog.get_logger(__name__)

SHUFFLE_OFFSET = 202
DROPOUT_OFFSET = 303

EpochCallback = Callable[[EpochRecord], None]


def _check_data(model: McfModel, bundle: FeatureBundle, role: str) -> None:
    model.check_geometry(bundle.geometry)
    model.check_task(bundle.task, bundle.n_disc)
    logger.debug("Checked dataset", role=role, samples=len(bundle))


def fit(
    model: McfModel,
    train_set: FeatureBundle,
    val_set: Optional[FeatureBundle],
    cfg: TrainConfig,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainHistory:
    """Train `model` in place and return one record per completed epoch.

    The selection criterion is validation loss, or training loss when there
    is no validation data. With `cfg.keep_best` the best epoch's parameters
    are restored before returning.
    """
    if len(train_set) == 0:
        raise DataError("training set is empty")
    _check_data(model, train_set, "train")
    if val_set is not None and len(val_set) > 0:
        _check_data(model, val_set, "val")
    else:
        val_set = None
    if model.config.task is Task.MULTILABEL_CONT and cfg.lambda1 + cfg.lambda2 <= 0:
        raise ConfigurationError("lambda1 + lambda2 must be positive for multilabel_cont")

    frozen = model.freeze(cfg.freeze)
    if cfg.freeze:
        logger.info("Froze parameters", prefixes=cfg.freeze, tensors=len(frozen))

    optimizer = build_optimizer(model.parameters(), cfg)
    root = RngState(cfg.seed)
    shuffle_rng = root.derive(SHUFFLE_OFFSET)
    dropout_rng = root.derive(DROPOUT_OFFSET)

    history = TrainHistory()
    best_state: Optional[dict[str, np.ndarray]] = None
    since_best = 0
    n = len(train_set)

    for epoch in range(cfg.epochs):
        lr = exp_schedule(cfg.lr0, cfg.gamma, epoch)
        order = shuffle_rng.generator().permutation(n)
        total = 0.0

        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            out = mcf_forward(model, train_set.batch(idx), Mode.TRAIN, dropout_rng)
            loss = task_loss(
                out.disc_logits, out.cont, train_set.labels(idx), model.config,
                cfg.lambda1, cfg.lambda2,
            )
            if loss.requires_grad:
                loss.backward()
                optimizer.step(lr)
            total += loss.item() * idx.size

        record = EpochRecord(epoch=epoch, lr=lr, train_loss=total / n)
        if val_set is not None:
            report = evaluate(model, val_set, lambda1=cfg.lambda1, lambda2=cfg.lambda2)
            record.val_loss = report.loss
            record.metrics = report.headline()
        history.records.append(record)

        criterion = record.val_loss if record.val_loss is not None else record.train_loss
        if history.best_criterion is None or criterion < history.best_criterion:
            history.best_criterion = criterion
            history.best_epoch = epoch
            best_state = model.state_dict()
            since_best = 0
        else:
            since_best += 1

        logger.info(
            "Epoch complete",
            epoch=epoch,
            lr=lr,
            train_loss=record.train_loss,
            val_loss=record.val_loss,
            **record.metrics,
        )
        if on_epoch is not None:
            on_epoch(record)

        if cfg.patience is not None and since_best >= cfg.patience:
            history.stopped_early = True
            logger.info("Early stopping", epoch=epoch, best_epoch=history.best_epoch)
            break

    if cfg.keep_best and best_state is not None:
        model.load_state_dict(best_state)
    return history


def history_lines(history: TrainHistory, created: Optional[datetime] = None) -> str:
    """JSON-lines export: one `epoch` record per line, then a `summary` line.

    Keys are sorted so identical runs produce identical bytes; `created`
    adds a leading `# created` comment.
    """
    lines = []
    if created is not None:
        lines.append(f"# created {created.astimezone(timezone.utc).isoformat(timespec='seconds')}")
    for record in history.records:
        lines.append(json.dumps({"kind": "epoch", **record.model_dump()}, sort_keys=True))
    lines.append(json.dumps(
        {
            "kind": "summary",
            "best_epoch": history.best_epoch,
            "best_criterion": history.best_criterion,
            "epochs": len(history.records),
            "stopped_early": history.stopped_early,
        },
        sort_keys=True,
    ))
    return "\n".join(lines) + "\n"

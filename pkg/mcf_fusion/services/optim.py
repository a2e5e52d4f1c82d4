"""Optimizers (SGD with momentum, Adam, AdamW) and the exponential LR schedule."""

from collections.abc import Sequence

import numpy as np
import structlog

from mcf_fusion.api.dto import OptimizerKind, TrainConfig
from mcf_fusion.core.errors import UsageError
from mcf_fusion.nn.tensor import Parameter

logger = structlog.get_logger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def exp_schedule(lr0: float, gamma: float, epoch: int) -> float:
    """Learning rate for `epoch` (0-based): lr0 · gamma^epoch."""
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    return lr0 * gamma**epoch


class Optimizer:
    """Updates trainable parameters in place; frozen ones are never touched."""

    def __init__(self, params: Sequence[Parameter]):
        self.params = list(params)

    def _grad(self, p: Parameter) -> np.ndarray:
        if p.grad is None:
            raise UsageError(f"parameter {p.name or '<unnamed>'} has no gradient; call backward() first")
        return p.grad

    def step(self, lr: float) -> None:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class SGD(Optimizer):
    """v ← μv + g; p ← p − lr·v."""

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9):
        super().__init__(params)
        self.momentum = momentum
        self.velocity: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if not p.trainable:
                continue
            g = self._grad(p)
            if self.momentum:
                v = self.velocity[i]
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[i] = v
                g = v
            p.data -= (lr * g).astype(p.dtype)


class Adam(Optimizer):
    """Bias-corrected first/second moments; step count kept per parameter."""

    def __init__(
        self,
        params: Sequence[Parameter],
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ):
        super().__init__(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.t = [0] * len(self.params)

    def _decay(self, p: Parameter, lr: float) -> None:
        pass

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if not p.trainable:
                continue
            g = self._grad(p).astype(np.float64)
            self._decay(p, lr)
            self.t[i] += 1
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1 ** self.t[i])
            v_hat = self.v[i] / (1.0 - self.beta2 ** self.t[i])
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


class AdamW(Adam):
    """Adam plus decoupled weight decay p ← p − lr·wd·p."""

    def __init__(self, params: Sequence[Parameter], weight_decay: float = 0.01, **kwargs: float):
        super().__init__(params, **kwargs)
        self.weight_decay = weight_decay

    def _decay(self, p: Parameter, lr: float) -> None:
        if self.weight_decay:
            p.data -= (lr * self.weight_decay * p.data).astype(p.dtype)


def build_optimizer(params: Sequence[Parameter], cfg: TrainConfig) -> Optimizer:
    kind = OptimizerKind(cfg.optimizer)
    if kind is OptimizerKind.SGD:
        optimizer: Optimizer = SGD(params, momentum=cfg.momentum)
    elif kind is OptimizerKind.ADAM:
        optimizer = Adam(params)
    else:
        optimizer = AdamW(params, weight_decay=cfg.weight_decay)
    logger.debug("Built optimizer", optimizer=kind.value, parameters=len(optimizer.params))
    return optimizer

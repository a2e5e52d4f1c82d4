"""Differentiable primitives for the MCF forward pass.

Every op accepts leading batch dimensions; the documented shapes are the
trailing ones (e.g. softmax_rows works on the last axis of `...×t×n`).
"""

from __future__ import annotations

from collections.abc import Iterator
from contextlib import contextmanager
from contextvars import ContextVar
from enum import Enum
from typing import Any, Optional

import numpy as np

from mcf_fusion.core.errors import DimensionError, InvalidMaskError, ParameterError
from mcf_fusion.nn.tensor import Parameter, RngState, Tensor, make_node

MASK_FILL = -1e9


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class ActivationRecorder:
    """Collects ReLU sign patterns while active (used by the gradient checker)."""

    def __init__(self) -> None:
        self.patterns: list[np.ndarray] = []

    def same_as(self, other: ActivationRecorder) -> bool:
        if len(self.patterns) != len(other.patterns):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.patterns, other.patterns))


_RECORDER: ContextVar[Optional[ActivationRecorder]] = ContextVar("relu_recorder", default=None)


@contextmanager
def record_activations() -> Iterator[ActivationRecorder]:
    recorder = ActivationRecorder()
    token = _RECORDER.set(recorder)
    try:
        yield recorder
    finally:
        _RECORDER.reset(token)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    return make_node(x.data * factor, (x,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast.

    A 1-d left operand (an unbatched pooled vector) is treated as a single row.
    """
    if a.ndim == 1 and b.ndim == 2:
        row = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(row, (b.shape[1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} @ {b.shape}", a.shape, b.shape
        )

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        )

    return make_node(np.matmul(a.data, b.data), (a, b), backward)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    recorder = _RECORDER.get()
    if recorder is not None:
        recorder.patterns.append(active)
    return make_node(np.where(active, x.data, 0).astype(x.dtype), (x,), lambda g: (g * active,))


def sigmoid_array(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on raw arrays."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    return make_node(
        np.swapaxes(x.data, axis1, axis2),
        (x,),
        lambda g: (np.swapaxes(g, axis1, axis2),),
    )


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax over the last axis; masked positions get an additive -1e9 logit.

    `mask` is boolean and broadcastable to x.shape (True = valid).
    """
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            valid = np.broadcast_to(mask, x.shape)
        except ValueError:
            raise DimensionError(
                f"mask shape {mask.shape} does not broadcast to {x.shape}", mask.shape, x.shape
            ) from None
        if not valid.any(axis=-1).all():
            raise InvalidMaskError("softmax row has no unmasked position")
        logits = logits + np.where(mask, 0.0, MASK_FILL).astype(x.dtype)

    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_node(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Parameter, beta: Parameter, eps: float = 1e-5) -> Tensor:
    """Per-row standardization (population variance) followed by gamma/beta."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm width {d} does not match gamma {gamma.shape} / beta {beta.shape}",
            x.shape, gamma.shape,
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(out, (x, gamma, beta), backward)


def linear(x: Tensor, W: Parameter, b: Parameter) -> Tensor:
    """xW + b, bias broadcast over rows."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"linear shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}", x.shape, W.shape
        )
    return add(matmul(x, W), b)


def dropout(x: Tensor, p: float, mode: Mode, rng: Optional[RngState]) -> Tensor:
    """Inverted dropout; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}", {"p": p})
    if mode is Mode.EVAL or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an RngState")

    keep = rng.generator().random(x.shape) >= p
    factor = (keep / (1.0 - p)).astype(x.dtype)
    return make_node(x.data * factor, (x,), lambda g: (g * factor,))


def masked_mean_pool(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over the token axis (-2) of the unmasked rows only."""
    if mask is None:
        count = x.shape[-2]
        return make_node(
            x.data.mean(axis=-2),
            (x,),
            lambda g: (np.broadcast_to(g[..., None, :] / count, x.shape),),
        )

    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise DimensionError(
            f"pool mask {mask.shape} does not match tokens {x.shape[:-1]}", mask.shape, x.shape
        )
    counts = mask.sum(axis=-1)
    if (counts == 0).any():
        raise InvalidMaskError("mean pool over an empty mask")
    weights = (mask / counts[..., None]).astype(x.dtype)[..., None]
    pooled = (x.data * weights).sum(axis=-2)
    return make_node(pooled, (x,), lambda g: (g[..., None, :] * weights,))


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """a's entries followed by b's entries along the last axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat leading shapes differ: {a.shape} vs {b.shape}", a.shape, b.shape)
    split = a.shape[-1]
    return make_node(
        np.concatenate([a.data, b.data], axis=-1),
        (a, b),
        lambda g: (g[..., :split], g[..., split:]),
    )


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return make_node(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),),
    )

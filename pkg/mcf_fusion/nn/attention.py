"""Scaled dot-product and multi-head attention."""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator
from typing import Optional

import numpy as np

from mcf_fusion.core.errors import DimensionError, ParameterError
from mcf_fusion.nn import ops
from mcf_fusion.nn.layers import Module, join_name, xavier_uniform
from mcf_fusion.nn.tensor import Parameter, Tensor

WeightsHook = Callable[[np.ndarray], None]


class MhaParams(Module):
    """Projections for one multi-head attention sublayer (biases on all four)."""

    def __init__(self, d_model: int, heads: int, gen: np.random.Generator):
        if heads < 1 or d_model % heads != 0:
            raise ParameterError(
                f"d_model={d_model} is not divisible by heads={heads}",
                {"d_model": d_model, "heads": heads},
            )
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        for name in ("q", "k", "v", "o"):
            setattr(self, f"W_{name}", Parameter(xavier_uniform(gen, d_model, d_model), f"W_{name}"))
            setattr(self, f"b_{name}", Parameter(np.zeros(d_model, dtype=np.float32), f"b_{name}"))

    W_q: Parameter
    W_k: Parameter
    W_v: Parameter
    W_o: Parameter
    b_q: Parameter
    b_k: Parameter
    b_v: Parameter
    b_o: Parameter

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name in ("W_q", "b_q", "W_k", "b_k", "W_v", "b_v", "W_o", "b_o"):
            yield join_name(prefix, name), getattr(self, name)


def _key_mask(mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
    """(..., t_k) key mask -> (..., 1, t_k) so it broadcasts over query rows."""
    if mask is None:
        return None
    return np.asarray(mask, dtype=bool)[..., None, :]


def scaled_dot_attention(
    Q: Tensor, K: Tensor, V: Tensor, mask: Optional[np.ndarray] = None
) -> tuple[Tensor, Tensor]:
    """softmax(QKᵀ/√d_h) V; returns (context, weights)."""
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"K {K.shape} and V {V.shape} disagree on t_k", K.shape, V.shape)
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"Q {Q.shape} and K {K.shape} disagree on width", Q.shape, K.shape)

    scores = ops.scale(ops.matmul(Q, ops.swapaxes(K, -1, -2)), 1.0 / math.sqrt(Q.shape[-1]))
    weights = ops.softmax_rows(scores, _key_mask(mask))
    return ops.matmul(weights, V), weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    return ops.swapaxes(ops.reshape(x, (*lead, t, heads, d // heads)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = ops.swapaxes(x, -3, -2)
    *lead, t, heads, d_head = x.shape
    return ops.reshape(x, (*lead, t, heads * d_head))


def multi_head_attention(
    p: MhaParams,
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask: Optional[np.ndarray] = None,
    on_weights: Optional[WeightsHook] = None,
) -> Tensor:
    """Project, attend per head, concatenate heads, project out.

    `on_weights` receives a read-only view of the per-head weights
    (..., heads, t_q, t_k).
    """
    for label, x in (("Q", Q), ("K", K), ("V", V)):
        if x.shape[-1] != p.d_model:
            raise DimensionError(
                f"{label} width {x.shape[-1]} does not match d_model={p.d_model}",
                x.shape, (p.d_model,),
            )

    q = _split_heads(ops.linear(Q, p.W_q, p.b_q), p.heads)
    k = _split_heads(ops.linear(K, p.W_k, p.b_k), p.heads)
    v = _split_heads(ops.linear(V, p.W_v, p.b_v), p.heads)

    # Insert the head axis: (..., t_k) -> (..., 1, t_k).
    head_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, :]
    context, weights = scaled_dot_attention(q, k, v, head_mask)

    if on_weights is not None:
        view = weights.data.view()
        view.flags.writeable = False
        on_weights(view)

    return ops.linear(_merge_heads(context), p.W_o, p.b_o)

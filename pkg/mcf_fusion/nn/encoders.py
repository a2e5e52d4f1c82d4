"""Cross-modal encoder layers and the CM_enc stacking rule.

MHA_enc:      Q' = LN1(Q + Dropout(MHA(Q, K, V)))
              Q* = LN2(Dropout(FFN(Q')) + Q')
SAG-MHA_enc:  Q' = LN_self(Q + Dropout(MHA(Q, Q, Q)))
              Q* = MHA_enc(Q', K, V)
CM_enc:       Q_0 = Enc_0(Q, K, V);  Q_i = Enc_i(Q_{i-1}, K, V)

Post-norm as written; no positional encodings (inputs are already contextual
token embeddings).
"""

from __future__ import annotations

from collections.abc import Callable, Iterator
from enum import Enum
from typing import Optional, Union

import numpy as np

from mcf_fusion.core.errors import ParameterError
from mcf_fusion.nn import ops
from mcf_fusion.nn.attention import MhaParams, multi_head_attention
from mcf_fusion.nn.layers import FeedForward, LayerNorm, Module, ffn, join_name
from mcf_fusion.nn.ops import Mode
from mcf_fusion.nn.tensor import Parameter, RngState, Tensor

DEFAULT_DROPOUT = 0.1

LayerHook = Callable[[int, Tensor, Tensor, Tensor], None]


class EncoderVariant(str, Enum):
    MHA_ENC = "mha_enc"
    SAG_MHA_ENC = "sag_mha_enc"


class MhaEncLayer(Module):
    def __init__(
        self, d_model: int, heads: int, gen: np.random.Generator, dropout_p: float = DEFAULT_DROPOUT
    ):
        self.mha = MhaParams(d_model, heads, gen)
        self.ln1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, gen)
        self.ln2 = LayerNorm(d_model)
        self.dropout_p = dropout_p

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        yield from self.mha.named_parameters(join_name(prefix, "mha"))
        yield from self.ln1.named_parameters(join_name(prefix, "ln1"))
        yield from self.ffn.named_parameters(join_name(prefix, "ffn"))
        yield from self.ln2.named_parameters(join_name(prefix, "ln2"))

    def __call__(self, Q: Tensor, K: Tensor, V: Tensor, mask: Optional[np.ndarray],
                 mode: Mode, rng: Optional[RngState]) -> Tensor:
        return mha_enc_forward(self, Q, K, V, mask, mode, rng)


class SagMhaEncLayer(Module):
    """Self-attention over the queries, then an MHA_enc layer."""

    def __init__(
        self, d_model: int, heads: int, gen: np.random.Generator, dropout_p: float = DEFAULT_DROPOUT
    ):
        self.self_mha = MhaParams(d_model, heads, gen)
        self.ln_self = LayerNorm(d_model)
        self.inner = MhaEncLayer(d_model, heads, gen, dropout_p)
        self.dropout_p = dropout_p

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        yield from self.self_mha.named_parameters(join_name(prefix, "self_mha"))
        yield from self.ln_self.named_parameters(join_name(prefix, "ln_self"))
        yield from self.inner.named_parameters(join_name(prefix, "inner"))

    def __call__(self, Q: Tensor, K: Tensor, V: Tensor, mask: Optional[np.ndarray],
                 mode: Mode, rng: Optional[RngState]) -> Tensor:
        return sag_mha_enc_forward(self, Q, K, V, mask, mode, rng)


EncoderLayer = Union[MhaEncLayer, SagMhaEncLayer]


class CmEncBlock(Module):
    """L encoder layers of one variant sharing a fixed key/value context."""

    def __init__(
        self,
        variant: EncoderVariant,
        num_layers: int,
        d_model: int,
        heads: int,
        gen: np.random.Generator,
        dropout_p: float = DEFAULT_DROPOUT,
    ):
        if num_layers < 1:
            raise ParameterError(f"CM_enc needs at least one layer, got {num_layers}")
        self.variant = EncoderVariant(variant)
        self.d_model = d_model
        self.heads = heads
        layer_cls = MhaEncLayer if self.variant is EncoderVariant.MHA_ENC else SagMhaEncLayer
        self.layers: list[EncoderLayer] = [
            layer_cls(d_model, heads, gen, dropout_p) for _ in range(num_layers)
        ]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(join_name(prefix, f"layer{i}"))

    def __call__(self, Q: Tensor, K: Tensor, V: Tensor, mask: Optional[np.ndarray],
                 mode: Mode, rng: Optional[RngState]) -> Tensor:
        return cm_enc_forward(self, Q, K, V, mask, mode, rng)


def mha_enc_forward(
    layer: MhaEncLayer,
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask: Optional[np.ndarray],
    mode: Mode,
    rng: Optional[RngState],
) -> Tensor:
    attended = multi_head_attention(layer.mha, Q, K, V, mask)
    q_prime = layer.ln1(ops.add(Q, ops.dropout(attended, layer.dropout_p, mode, rng)))
    transformed = ops.dropout(ffn(q_prime, layer.ffn), layer.dropout_p, mode, rng)
    return layer.ln2(ops.add(transformed, q_prime))


def sag_mha_enc_forward(
    layer: SagMhaEncLayer,
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask: Optional[np.ndarray],
    mode: Mode,
    rng: Optional[RngState],
) -> Tensor:
    # Query tokens are never masked.
    attended = multi_head_attention(layer.self_mha, Q, Q, Q)
    q_prime = layer.ln_self(ops.add(Q, ops.dropout(attended, layer.dropout_p, mode, rng)))
    return mha_enc_forward(layer.inner, q_prime, K, V, mask, mode, rng)


def cm_enc_forward(
    block: CmEncBlock,
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask: Optional[np.ndarray],
    mode: Mode,
    rng: Optional[RngState],
    on_layer: Optional[LayerHook] = None,
) -> Tensor:
    """Feed each layer's output to the next as the query; K and V stay fixed.

    `on_layer(i, Q_in, K, V)` is called before layer i runs.
    """
    query = Q
    for i, layer in enumerate(block.layers):
        if on_layer is not None:
            on_layer(i, query, K, V)
        query = layer(query, K, V, mask, mode, rng)
    return query

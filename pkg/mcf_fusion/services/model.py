"""MCF network assembly: adapters, context streams, fusion and task heads."""

from collections.abc import Iterator
from dataclasses import dataclass
from typing import Optional

import numpy as np
import structlog

from mcf_fusion.api.dto import AVD_DIMS, Geometry, McfConfig, StreamSet, Task
from mcf_fusion.core.errors import DataError, DimensionError, GeometryMismatchError
from mcf_fusion.nn import ops
from mcf_fusion.nn.encoders import CmEncBlock, cm_enc_forward
from mcf_fusion.nn.layers import Linear, Module, join_name
from mcf_fusion.nn.ops import Mode
from mcf_fusion.nn.tensor import Parameter, RngState, Tensor

logger = structlog.get_logger(__name__)

# Fixed seed offsets for per-component streams.
INIT_OFFSET = 101


@dataclass
class StreamBatch:
    """Stream inputs for one sample (t×d) or a stack of samples (B×t×d)."""
    e_pe: np.ndarray
    e_fg: np.ndarray
    e_vs: np.ndarray
    fg_mask: np.ndarray

    def __post_init__(self) -> None:
        self.fg_mask = np.asarray(self.fg_mask, dtype=bool)
        if self.fg_mask.shape != self.e_fg.shape[:-1]:
            raise DimensionError(
                f"fg_mask {self.fg_mask.shape} does not match e_FG tokens {self.e_fg.shape[:-1]}",
                self.fg_mask.shape, self.e_fg.shape,
            )

    @property
    def batch_size(self) -> Optional[int]:
        return self.e_pe.shape[0] if self.e_pe.ndim == 3 else None


@dataclass
class McfOutput:
    disc_logits: Tensor
    cont: Optional[Tensor] = None


class Head(Module):
    """Linear head, or linear → ReLU → linear when `hidden` > 0."""

    def __init__(self, d_in: int, d_out: int, gen: np.random.Generator, hidden: int = 0):
        self.hidden = Linear(d_in, hidden, gen) if hidden > 0 else None
        self.out = Linear(hidden or d_in, d_out, gen)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        if self.hidden is None:
            yield from self.out.named_parameters(prefix)
            return
        yield from self.hidden.named_parameters(join_name(prefix, "hidden"))
        yield from self.out.named_parameters(join_name(prefix, "out"))

    def __call__(self, x: Tensor) -> Tensor:
        if self.hidden is not None:
            x = ops.relu(self.hidden(x))
        return self.out(x)


class McfModel(Module):
    """Stream adapters, one CM_enc block per context stream, fusion, heads."""

    def __init__(self, config: McfConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        gen = RngState(seed).derive(INIT_OFFSET).generator()
        d = config.d_model
        streams = config.streams

        self.adapter_pe = Linear(config.d_pe, d, gen, identity=True)
        self.adapter_fg: Optional[Linear] = None
        self.adapter_vs: Optional[Linear] = None
        self.fg_block: Optional[CmEncBlock] = None
        self.vs_block: Optional[CmEncBlock] = None

        if streams in (StreamSet.BOTH, StreamSet.FG):
            self.adapter_fg = Linear(config.d_fg, d, gen, identity=True)
            self.fg_block = CmEncBlock(
                config.variant, config.layers, d, config.heads, gen, config.dropout_p
            )
        if streams in (StreamSet.BOTH, StreamSet.VS, StreamSet.LATE):
            self.adapter_vs = Linear(config.d_vs, d, gen, identity=True)
        if streams in (StreamSet.BOTH, StreamSet.VS):
            self.vs_block = CmEncBlock(
                config.variant, config.layers, d, config.heads, gen, config.dropout_p
            )

        self.head_disc = Head(config.fusion_width, config.num_classes, gen, config.head_hidden)
        self.head_cont = (
            Head(config.fusion_width, AVD_DIMS, gen, config.head_hidden)
            if config.task is Task.MULTILABEL_CONT else None
        )

        logger.debug(
            "Built MCF model",
            variant=config.variant.value,
            streams=streams.value,
            layers=config.layers,
            d_model=d,
            parameters=self.parameter_count(),
        )

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        parts: list[tuple[str, Optional[Module]]] = [
            ("adapter_pe", self.adapter_pe),
            ("adapter_fg", self.adapter_fg),
            ("adapter_vs", self.adapter_vs),
            ("fg_block", self.fg_block),
            ("vs_block", self.vs_block),
            ("head_disc", self.head_disc),
            ("head_cont", self.head_cont),
        ]
        for name, part in parts:
            if part is not None:
                yield from part.named_parameters(join_name(prefix, name))

    def check_geometry(self, geometry: Geometry) -> None:
        """Raise GeometryMismatchError naming the first width the data disagrees on."""
        for field, expected, actual in (
            ("d_PE", self.config.d_pe, geometry.d_pe),
            ("d_FG", self.config.d_fg, geometry.d_fg),
            ("d_VS", self.config.d_vs, geometry.d_vs),
        ):
            if expected != actual:
                raise GeometryMismatchError(field, expected, actual)

    def check_task(self, task: Task, n_disc: int) -> None:
        if task is not self.config.task:
            raise DataError(
                f"task mismatch: model is {self.config.task.value}, data is {task.value}",
                {"field": "task"},
            )
        if n_disc != self.config.num_classes:
            raise GeometryMismatchError("n_disc", self.config.num_classes, n_disc)


def project_stream(e: Tensor | np.ndarray, adapter: Linear) -> Tensor:
    """Per-token projection d_in → d_model."""
    e = ops.as_tensor(e)
    if e.shape[-1] != adapter.d_in:
        raise DimensionError(
            f"stream width {e.shape[-1]} does not match adapter input {adapter.d_in}",
            e.shape, adapter.W.shape,
        )
    return adapter(e)


def foreground_stream(
    model: McfModel,
    batch: StreamBatch,
    mode: Mode = Mode.EVAL,
    rng: Optional[RngState] = None,
    query: Optional[Tensor] = None,
) -> Tensor:
    """Person tokens attend to the (masked) foreground tokens."""
    if model.fg_block is None or model.adapter_fg is None:
        raise DataError("model was built without the foreground stream")
    q = query if query is not None else project_stream(batch.e_pe, model.adapter_pe)
    kv = project_stream(batch.e_fg, model.adapter_fg)
    return cm_enc_forward(model.fg_block, q, kv, kv, batch.fg_mask, mode, rng)


def visual_stream(
    model: McfModel,
    batch: StreamBatch,
    mode: Mode = Mode.EVAL,
    rng: Optional[RngState] = None,
    query: Optional[Tensor] = None,
) -> Tensor:
    """Person tokens attend to the visual-scene tokens; scene tokens are never masked."""
    if model.vs_block is None or model.adapter_vs is None:
        raise DataError("model was built without the visual-scene stream")
    q = query if query is not None else project_stream(batch.e_pe, model.adapter_pe)
    kv = project_stream(batch.e_vs, model.adapter_vs)
    return cm_enc_forward(model.vs_block, q, kv, kv, None, mode, rng)


def scene_summary(model: McfModel, batch: StreamBatch) -> Tensor:
    """Adapted first visual-scene token (the scene encoder's summary token), no cross-attention."""
    if model.adapter_vs is None:
        raise DataError("model was built without a visual-scene adapter")
    # Slicing keeps a one-token axis so each sample projects as its own row.
    return ops.masked_mean_pool(project_stream(batch.e_vs[..., :1, :], model.adapter_vs))


def fuse(e_pe_fg: Tensor, e_pe_vs: Tensor) -> Tensor:
    """Mean-pool each stream over its tokens and concatenate, FG half first."""
    return ops.concat_last(ops.masked_mean_pool(e_pe_fg), ops.masked_mean_pool(e_pe_vs))


def heads_forward(model: McfModel, e_fusion: Tensor) -> McfOutput:
    width = model.config.fusion_width
    if e_fusion.shape[-1] != width:
        raise DimensionError(
            f"fusion width {e_fusion.shape[-1]} does not match heads input {width}",
            e_fusion.shape, (width,),
        )
    # One (1, width) row per sample keeps the head products independent of batch size.
    rows = ops.reshape(e_fusion, (*e_fusion.shape[:-1], 1, width))
    disc = _drop_row_axis(model.head_disc(rows))
    cont = _drop_row_axis(model.head_cont(rows)) if model.head_cont is not None else None
    return McfOutput(disc_logits=disc, cont=cont)


def _drop_row_axis(x: Tensor) -> Tensor:
    return ops.reshape(x, (*x.shape[:-2], x.shape[-1]))


def fusion_vector(
    model: McfModel, batch: StreamBatch, mode: Mode = Mode.EVAL, rng: Optional[RngState] = None
) -> Tensor:
    streams = model.config.streams
    q = project_stream(batch.e_pe, model.adapter_pe)
    if streams is StreamSet.NONE:
        return ops.masked_mean_pool(q)
    if streams is StreamSet.FG:
        return ops.masked_mean_pool(foreground_stream(model, batch, mode, rng, query=q))
    if streams is StreamSet.LATE:
        return ops.concat_last(ops.masked_mean_pool(q), scene_summary(model, batch))
    if streams is StreamSet.VS:
        return ops.masked_mean_pool(visual_stream(model, batch, mode, rng, query=q))
    return fuse(
        foreground_stream(model, batch, mode, rng, query=q),
        visual_stream(model, batch, mode, rng, query=q),
    )


def mcf_forward(
    model: McfModel, batch: StreamBatch, mode: Mode = Mode.EVAL, rng: Optional[RngState] = None
) -> McfOutput:
    return heads_forward(model, fusion_vector(model, batch, mode, rng))

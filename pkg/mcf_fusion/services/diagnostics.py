"""Gradient suites: every primitive plus the full model at toy geometry."""

from collections.abc import Callable
from dataclasses import dataclass
from typing import Optional

import numpy as np
import structlog

from mcf_fusion.api.dto import Geometry, McfConfig, Task
from mcf_fusion.core.config import get_settings
from mcf_fusion.nn import ops
from mcf_fusion.nn.attention import MhaParams, multi_head_attention
from mcf_fusion.nn.encoders import EncoderVariant
from mcf_fusion.nn.gradcheck import GradCheckReport, grad_check
from mcf_fusion.nn.layers import FeedForward, LayerNorm, Linear, ffn
from mcf_fusion.nn.tensor import Parameter, Tensor
from mcf_fusion.services.losses import (
    binary_cross_entropy,
    cross_entropy,
    mean_squared_error,
    task_loss,
)
from mcf_fusion.services.model import McfModel, StreamBatch, mcf_forward

logger = structlog.get_logger(__name__)

GRADCHECK_THRESHOLD = 1e-4

# One model run per encoder variant; together they cover both objectives.
MODEL_SUITES = (
    (EncoderVariant.MHA_ENC, Task.MULTILABEL_CONT),
    (EncoderVariant.SAG_MHA_ENC, Task.SINGLE_LABEL),
)


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport
    threshold: float = GRADCHECK_THRESHOLD

    @property
    def passed(self) -> bool:
        return self.report.passed(self.threshold)


def _weighted_mean(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalarize with fixed random weights so sum-preserving ops still have a gradient."""
    return ops.mean(ops.mul(out, weights))


def _param(gen: np.random.Generator, *shape: int, name: str = "") -> Parameter:
    return Parameter(gen.standard_normal(shape), name)


def primitive_checks(
    seed: int = 0,
) -> list[tuple[str, Callable[[], Tensor], list[tuple[str, Tensor]]]]:
    """(name, scalar function, tensors) for each differentiable primitive."""
    gen = np.random.default_rng(seed)
    checks: list[tuple[str, Callable[[], Tensor], list[tuple[str, Tensor]]]] = []

    a, b = _param(gen, 3, 4), _param(gen, 4, 2)
    w = gen.standard_normal((3, 2))
    checks.append(("matmul", lambda: _weighted_mean(ops.matmul(a, b), w), [("a", a), ("b", b)]))

    x = _param(gen, 3, 5)
    mask = np.array([True, True, False, True, True])
    ws = gen.standard_normal((3, 5))
    checks.append(("softmax_rows", lambda: _weighted_mean(ops.softmax_rows(x, mask), ws), [("x", x)]))

    xl = _param(gen, 4, 6)
    ln = LayerNorm(6)
    ln.gamma.data = gen.uniform(0.5, 1.5, 6)
    ln.beta.data = gen.standard_normal(6)
    wl = gen.standard_normal((4, 6))
    checks.append((
        "layer_norm",
        lambda: _weighted_mean(ln(xl), wl),
        [("x", xl), ("gamma", ln.gamma), ("beta", ln.beta)],
    ))

    xi = _param(gen, 3, 4)
    lin = Linear(4, 5, gen)
    lin.b.data = gen.standard_normal(5)
    wi = gen.standard_normal((3, 5))
    checks.append(("linear", lambda: _weighted_mean(lin(xi), wi), [("x", xi), ("W", lin.W), ("b", lin.b)]))

    xf = _param(gen, 3, 4)
    ff = FeedForward(4, gen)
    ff.b_1.data = gen.standard_normal(ff.d_ff) * 0.5
    wf = gen.standard_normal((3, 4))
    checks.append((
        "ffn",
        lambda: _weighted_mean(ffn(xf, ff), wf),
        [("x", xf)] + [(name, p) for name, p in ff.named_parameters()],
    ))

    xp = _param(gen, 5, 3)
    pool_mask = np.array([True, False, True, True, False])
    wp = gen.standard_normal(3)
    checks.append((
        "masked_mean_pool", lambda: _weighted_mean(ops.masked_mean_pool(xp, pool_mask), wp), [("x", xp)]
    ))

    ca, cb = _param(gen, 2), _param(gen, 3)
    wc = gen.standard_normal(5)
    checks.append(("concat_last", lambda: _weighted_mean(ops.concat_last(ca, cb), wc), [("a", ca), ("b", cb)]))

    mha = MhaParams(8, 2, gen)
    for _, p in mha.named_parameters():
        if p.ndim == 1:
            p.data = gen.standard_normal(p.shape) * 0.1
    q, kv = _param(gen, 3, 8), _param(gen, 5, 8)
    key_mask = np.array([True, True, True, False, True])
    wm = gen.standard_normal((3, 8))
    checks.append((
        "multi_head_attention",
        lambda: _weighted_mean(multi_head_attention(mha, q, kv, kv, key_mask), wm),
        [("Q", q), ("KV", kv)] + [(name, p) for name, p in mha.named_parameters()],
    ))

    zb = _param(gen, 4, 5)
    yb = (gen.random((4, 5)) < 0.5).astype(np.float64)
    checks.append(("binary_cross_entropy", lambda: binary_cross_entropy(zb, yb), [("logits", zb)]))

    zm = _param(gen, 4, 3)
    ym = gen.random((4, 3))
    checks.append(("mean_squared_error", lambda: mean_squared_error(zm, ym), [("pred", zm)]))

    zc = _param(gen, 4, 7)
    yc = gen.integers(0, 7, size=4)
    checks.append(("cross_entropy", lambda: cross_entropy(zc, yc), [("logits", zc)]))

    return checks


def toy_batch(geometry: Geometry, batch: int, gen: np.random.Generator) -> StreamBatch:
    g = geometry
    lengths = gen.integers(max(1, g.t_fg // 2), g.t_fg + 1, size=batch)
    return StreamBatch(
        e_pe=gen.standard_normal((batch, g.t_pe, g.d_pe)),
        e_fg=gen.standard_normal((batch, g.t_fg, g.d_fg)),
        e_vs=gen.standard_normal((batch, g.t_vs, g.d_vs)),
        fg_mask=np.arange(g.t_fg)[None, :] < lengths[:, None],
    )


def toy_labels(task: Task, n_disc: int, batch: int, gen: np.random.Generator) -> dict[str, np.ndarray]:
    if task is Task.MULTILABEL_CONT:
        return {
            "y_disc": (gen.random((batch, n_disc)) < 0.5).astype(np.float64),
            "y_cont": gen.random((batch, 3)),
        }
    return {"y_class": gen.integers(0, n_disc, size=batch)}


def model_check(
    variant: EncoderVariant,
    task: Task,
    seed: int = 0,
    max_elements: Optional[int] = None,
    corrupt: float = 1.0,
) -> SuiteResult:
    """Full-model check: toy geometry, L=2, heads=2, d=16, dropout off."""
    geometry = Geometry.toy()
    config = McfConfig(
        variant=variant, layers=2, heads=2, d_model=16, task=task,
        n_disc=5, dropout_p=0.0,
        d_pe=geometry.d_pe, d_fg=geometry.d_fg, d_vs=geometry.d_vs,
    )
    model = McfModel(config, seed=seed)
    gen = np.random.default_rng(seed + 1)
    batch = toy_batch(geometry, 2, gen)
    labels = toy_labels(task, config.num_classes, 2, gen)

    def loss() -> Tensor:
        out = mcf_forward(model, batch)
        return task_loss(out.disc_logits, out.cont, labels, config, 0.8, 0.2)

    report = grad_check(
        loss, list(model.named_parameters()), max_elements=max_elements, seed=seed, corrupt=corrupt
    )
    return SuiteResult(f"model/{variant.value}/{task.value}", report)


def run_gradient_suites(
    seed: int = 0, corrupt: float = 1.0, max_elements: Optional[int] = None
) -> list[SuiteResult]:
    """Every primitive, then the full model for each encoder variant and objective."""
    if max_elements is None:
        max_elements = get_settings().GRADCHECK_MAX_ELEMENTS

    results = []
    for name, f, tensors in primitive_checks(seed):
        report = grad_check(f, tensors, max_elements=max_elements, seed=seed, corrupt=corrupt)
        results.append(SuiteResult(f"primitive/{name}", report))

    for variant, task in MODEL_SUITES:
        results.append(model_check(variant, task, seed, max_elements, corrupt))

    for result in results:
        logger.info(
            "Gradient suite",
            suite=result.name,
            max_rel_error=result.report.max_rel_error,
            passed=result.passed,
        )
    return results

"""Dense tensors with reverse-mode gradients."""

from __future__ import annotations

from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from mcf_fusion.core.errors import UsageError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_GRAD_ENABLED: ContextVar[bool] = ContextVar("grad_enabled", default=True)

_U64 = (1 << 64) - 1


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a graph."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def _as_array(data: Any) -> np.ndarray:
    if isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
        # 0-d results of numpy ops come back as scalars; keep their precision.
        return np.asarray(data)
    return np.asarray(data, dtype=np.float32)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Row-major float array plus the graph edge that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False):
        self.data: np.ndarray = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None or self.grad.shape != self.shape or self.grad.dtype != self.dtype:
            self.grad = grad.astype(self.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate d(self)/d(leaf) into every leaf that requires grad."""
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not require grad")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype)
        pending: dict[int, np.ndarray] = {id(self): seed}

        for node in reversed(_topological_order(self)):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                node._accumulate(node_grad)
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = _unbroadcast(parent_grad, parent.shape)
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    # Operator sugar; the implementations live in nn.ops.
    def __add__(self, other: Any) -> Tensor:
        from mcf_fusion.nn import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> Tensor:
        from mcf_fusion.nn import ops
        return ops.sub(self, other)

    def __mul__(self, other: Any) -> Tensor:
        from mcf_fusion.nn import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: Tensor) -> Tensor:
        from mcf_fusion.nn import ops
        return ops.matmul(self, other)

    def __neg__(self) -> Tensor:
        from mcf_fusion.nn import ops
        return ops.scale(self, -1.0)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op result, recording the edge only when a parent needs grad."""
    out = Tensor(data)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


class Parameter(Tensor):
    """Trainable leaf tensor. `grad` stays None until a backward pass reaches it."""

    __slots__ = ("name",)

    def __init__(self, data: Any, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = value

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class RngState:
    """Counter-based seed source: each draw gets a fresh generator from (seed, counter)."""

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        self.seed &= _U64
        self.counter &= _U64

    def generator(self) -> np.random.Generator:
        gen = np.random.default_rng([self.seed, self.counter])
        self.counter = (self.counter + 1) & _U64
        return gen

    def derive(self, offset: int) -> RngState:
        """Independent stream for a sub-component, at a fixed seed offset."""
        return RngState(seed=(self.seed + offset) & _U64)

"""Parameter containers: linear maps, layer norms, feed-forward blocks."""

from __future__ import annotations

from collections.abc import Iterable, Iterator

import numpy as np

from mcf_fusion.core.errors import CheckpointError, DimensionError
from mcf_fusion.nn import ops
from mcf_fusion.nn.tensor import Parameter, Tensor

FFN_EXPANSION = 2


def xavier_uniform(
    gen: np.random.Generator, fan_in: int, fan_out: int, dtype: type = np.float32
) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Module:
    """Base for anything that owns named parameters.

    Subclasses list their parameters explicitly in `named_parameters`; the
    order defines checkpoint layout and optimizer state order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(
                "State does not match module parameters",
                {"missing": missing[:10], "unexpected": unexpected[:10]},
            )
        for name, param in own.items():
            value = state[name]
            if value.shape != param.shape:
                raise CheckpointError(
                    f"Shape mismatch for {name}: {value.shape} vs {param.shape}",
                    {"name": name},
                )
            param.data = value.astype(param.dtype, copy=True)

    def freeze(self, prefixes: Iterable[str]) -> list[str]:
        """Mark parameters under any of `prefixes` as frozen; returns their names."""
        prefixes = tuple(prefixes)
        frozen = []
        for name, param in self.named_parameters():
            if prefixes and name.startswith(prefixes):
                param.trainable = False
                frozen.append(name)
        return frozen


def join_name(prefix: str, name: str) -> str:
    return f"{prefix}/{name}" if prefix else name


class Linear(Module):
    """y = xW + b with Xavier-uniform W, zero b (identity W when asked and square)."""

    def __init__(self, d_in: int, d_out: int, gen: np.random.Generator, identity: bool = False):
        self.d_in = d_in
        self.d_out = d_out
        if identity and d_in == d_out:
            weight = np.eye(d_in, dtype=np.float32)
        else:
            weight = xavier_uniform(gen, d_in, d_out)
        self.W = Parameter(weight, "W")
        self.b = Parameter(np.zeros(d_out, dtype=np.float32), "b")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.W, self.b)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        yield join_name(prefix, "W"), self.W
        yield join_name(prefix, "b"), self.b


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Parameter(np.ones(d, dtype=np.float32), "gamma")
        self.beta = Parameter(np.zeros(d, dtype=np.float32), "beta")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        yield join_name(prefix, "gamma"), self.gamma
        yield join_name(prefix, "beta"), self.beta


class FeedForward(Module):
    """Position-wise linear(d→d_ff), ReLU, linear(d_ff→d)."""

    def __init__(self, d: int, gen: np.random.Generator, d_ff: int | None = None):
        self.d = d
        self.d_ff = d_ff or FFN_EXPANSION * d
        self.W_1 = Parameter(xavier_uniform(gen, d, self.d_ff), "W_1")
        self.b_1 = Parameter(np.zeros(self.d_ff, dtype=np.float32), "b_1")
        self.W_2 = Parameter(xavier_uniform(gen, self.d_ff, d), "W_2")
        self.b_2 = Parameter(np.zeros(d, dtype=np.float32), "b_2")

    def __call__(self, x: Tensor) -> Tensor:
        return ffn(x, self)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        yield join_name(prefix, "W_1"), self.W_1
        yield join_name(prefix, "b_1"), self.b_1
        yield join_name(prefix, "W_2"), self.W_2
        yield join_name(prefix, "b_2"), self.b_2


def ffn(x: Tensor, p: FeedForward) -> Tensor:
    if x.shape[-1] != p.d:
        raise DimensionError(f"ffn expects width {p.d}, got {x.shape[-1]}", x.shape, (p.d,))
    hidden = ops.relu(ops.linear(x, p.W_1, p.b_1))
    return ops.linear(hidden, p.W_2, p.b_2)

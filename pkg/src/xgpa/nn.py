"""Parameter containers shared by the attention layers."""

from __future__ import annotations

from enum import Enum
from typing import Iterator

import numpy as np

from .tensor import Tensor, matmul


class Module:
    """Walks attributes in definition order to name and collect parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, (list, tuple)):
                        for j, sub in enumerate(item):
                            if isinstance(sub, Module):
                                yield from sub.named_parameters(f"{name}.{i}.{j}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def parameter(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


class Linear(Module):
    """Affine map over the last axis: ``x @ weight + bias``."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = parameter(glorot(rng, d_in, d_out))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight) if x.ndim >= 2 else matmul(x.reshape(1, -1), self.weight).reshape(-1)
        if self.bias is not None:
            out = out + self.bias
        return out


class AttentionVariant(str, Enum):
    """Which of the query/key/value mappings are learned."""

    FULL = "full"
    IDENTITY_VALUE = "identity_value"
    SHARED_QK_IDENTITY_VALUE = "shared_qk_identity_value"

    @property
    def identity_value(self) -> bool:
        return self is not AttentionVariant.FULL

    @property
    def shared_qk(self) -> bool:
        return self is AttentionVariant.SHARED_QK_IDENTITY_VALUE


class QKVMappings(Module):
    """F_Q, F_K, F_V as affine maps, with the tying each variant implies."""

    def __init__(self, rng: np.random.Generator, dim: int, variant: AttentionVariant):
        self.variant = AttentionVariant(variant)
        self.query = Linear(rng, dim, dim)
        self.key = None if self.variant.shared_qk else Linear(rng, dim, dim)
        self.value = None if self.variant.identity_value else Linear(rng, dim, dim)

    def q(self, x: Tensor) -> Tensor:
        return self.query(x)

    def k(self, x: Tensor) -> Tensor:
        return self.query(x) if self.key is None else self.key(x)

    def v(self, x: Tensor) -> Tensor:
        return x if self.value is None else self.value(x)

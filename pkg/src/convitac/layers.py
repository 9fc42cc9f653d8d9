"""Parameter containers and the small building blocks shared by the networks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def init_std(dim: int) -> float:
    """0.02 at ViT-Base width (768), growing as 1/sqrt(dim) for narrower models."""
    return 0.02 * math.sqrt(768.0 / dim)


def param(values, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float32), requires_grad=True, name=name)


class Module:
    """Attribute-walking parameter registry.

    Parameters are any :class:`Tensor` attributes with ``requires_grad`` set at
    construction; submodules and lists of submodules are walked in insertion
    order, which fixes checkpoint naming.
    """

    frozen = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .errors import DimensionError, ValidationError

        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise ValidationError(f"checkpoint lacks tensors: {missing}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, checkpoint has {arr.shape}")
            p.values = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """Row-wise affine map ``x @ weight + bias``."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, std: float = 0.02):
        self.weight = param(trunc_normal(rng, (in_dim, out_dim), std))
        if bias:
            self.bias = param(np.zeros(out_dim, dtype=np.float32))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = param(np.ones(dim, dtype=np.float32))
        self.bias = param(np.zeros(dim, dtype=np.float32))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)

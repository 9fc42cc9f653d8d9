"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, ValidationError
from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              frozen: Sequence[bool] | None = None) -> AdamState:
    """Update ``params`` in place; entries whose grad is None or that are frozen are skipped.

    The step counter advances on every call, including all-zero gradients.
    """
    if lr <= 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    if len(grads) != len(params):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state does not match the parameter list")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None or (frozen is not None and frozen[i]):
            continue
        m, v = state.m[i], state.v[i]
        if m.shape != p.shape or g.shape != p.shape:
            raise ContractError(f"param {i}: shape {p.shape}, grad {g.shape}, state {m.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    """Stateful wrapper over :func:`adam_step` bound to a list of tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(
            [p.values for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            *self.betas,
            eps=self.eps,
            frozen=[not p.requires_grad for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

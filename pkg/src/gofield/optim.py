"""Adam, written out so the update rule is explicit and testable."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import StructuralError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: torch.Tensor | None = None
    v: torch.Tensor | None = None


def adam_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (BETA1, BETA2),
    eps: float = EPS,
) -> tuple[torch.Tensor, AdamState]:
    """One bias-corrected Adam update, applied to ``param`` in place.

    ``m <- b1*m + (1-b1)*g``, ``v <- b2*v + (1-b2)*g**2`` and
    ``p <- p - lr * m_hat / (sqrt(v_hat) + eps)`` with
    ``m_hat = m / (1 - b1**t)``, ``v_hat = v / (1 - b2**t)``.
    """
    if grad.shape != param.shape:
        raise StructuralError(f"gradient shape {tuple(grad.shape)} != parameter shape {tuple(param.shape)}")
    b1, b2 = betas
    with torch.no_grad():
        if state.m is None:
            state.m = torch.zeros_like(param)
            state.v = torch.zeros_like(param)
        state.step += 1
        state.m.mul_(b1).add_(grad, alpha=1 - b1)
        state.v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
        m_hat = state.m / (1 - b1**state.step)
        v_hat = state.v / (1 - b2**state.step)
        param.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return param, state


@dataclass
class Adam:
    """Adam over a fixed list of tensors sharing one learning rate."""

    params: Sequence[torch.Tensor]
    lr: float = 1e-3
    betas: tuple[float, float] = (BETA1, BETA2)
    eps: float = EPS
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.states:
            self.states = [AdamState() for _ in self.params]

    def step(self, grads: Sequence[torch.Tensor], lr: float | None = None):
        if len(grads) != len(self.params):
            raise StructuralError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        lr = self.lr if lr is None else lr
        for p, g, s in zip(self.params, grads, self.states):
            adam_step(p, g, s, lr, self.betas, self.eps)

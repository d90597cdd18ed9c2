"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericalError
from .numcore import Tensor


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    names: list[str] = field(default_factory=list)
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], names: Sequence[str] | None = None, **hyper) -> "OptimState":
        names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], names, **hyper)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState) -> None:
    """One bias-corrected Adam update with decoupled decay, in place.

    All gradients are checked before anything is touched, so a non-finite
    gradient leaves parameters and state unchanged.
    """
    if state.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state have different lengths")
    for name, p, g in zip(state.names, params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{name}'")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.state = OptimState.for_params([p.value for p in self.params], self.names, lr=lr, beta1=beta1,
                                           beta2=beta2, eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adamw_step([p.value for p in self.params], [p.grad for p in self.params], self.state)

"""Adam optimizer with standard bias correction (β1=0.9, β2=0.999, ε=1e-8)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """First/second moment estimates for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """One in-place Adam update. Parameter moves by at most ≈ lr per step."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ValueError(f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    mhat = state.m / (1.0 - b1 ** state.t)
    vhat = state.v / (1.0 - b2 ** state.t)
    param -= lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class Adam:
    """Adam over a list of named parameters (order defines update order)."""

    lr: float
    states: dict = field(default_factory=dict)

    def step(self, named_params, named_grads) -> None:
        for (name, p), g in zip(named_params, named_grads):
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = AdamState.for_param(p)
            adam_step(p, g, st, self.lr)

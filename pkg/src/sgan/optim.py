"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def for_param(cls, p: Tensor) -> AdamState:
        return cls(np.zeros_like(p.data), np.zeros_like(p.data), 0)


def adam_step(
    params: Sequence[Tensor],
    states: Sequence[AdamState],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Apply one Adam update in place. Gradients are left untouched."""
    if len(params) != len(states):
        raise ValueError(f"{len(params)} parameters but {len(states)} optimizer states")
    for i, (p, st) in enumerate(zip(params, states)):
        if p.grad is None:
            raise ValueError(f"parameter {i} (shape {p.shape}) has no gradient")
        if st.first_moment.shape != p.shape:
            raise ValueError(f"optimizer state {i} has shape {st.first_moment.shape}, parameter has {p.shape}")
        g = p.grad
        st.step_count += 1
        t = st.step_count
        st.first_moment *= beta1
        st.first_moment += (1.0 - beta1) * g
        st.second_moment *= beta2
        st.second_moment += (1.0 - beta2) * (g * g)
        m_hat = st.first_moment / (1.0 - beta1**t)
        v_hat = st.second_moment / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    params: list[Tensor]
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        if not self.states:
            self.states = [AdamState.for_param(p) for p in self.params]

    def step(self) -> None:
        adam_step(self.params, self.states, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

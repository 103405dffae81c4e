"""Adam optimizer over Tensor parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter.

    Moments are kept in float64 whatever the parameter dtype, so squared
    float32 gradients cannot overflow.
    """

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros(p.shape) for p in params],
            v=[np.zeros(p.shape) for p in params],
            **kwargs,
        )


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update in place.

    Parameters without a gradient are treated as having a zero gradient.
    """
    if len(params) != len(state.m):
        raise ValueError("AdamState was built for a different parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        g = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)

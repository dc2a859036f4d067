"""Adam with bias correction and the triangular cyclical LR policy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_step", "CyclicalLr", "cyclical_lr"]


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place, using each param's .grad."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass(frozen=True)
class CyclicalLr:
    """Triangular schedule between base_lr and max_lr, per optimizer step."""

    base_lr: float = 5e-4
    max_lr: float = 1e-2
    step_size: int = 200

    def __post_init__(self):
        if not self.base_lr < self.max_lr:
            raise ValueError("CyclicalLr requires base_lr < max_lr")
        if self.step_size < 1:
            raise ValueError("CyclicalLr requires step_size >= 1")


def cyclical_lr(iteration: int, sched: CyclicalLr) -> float:
    """lr at `iteration`: base at 0, peak at step_size, period 2*step_size."""
    x = iteration / sched.step_size
    frac = max(0.0, 1.0 - abs(x % 2.0 - 1.0))
    return sched.base_lr + (sched.max_lr - sched.base_lr) * frac

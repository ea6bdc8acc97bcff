"""SGD with classic momentum, parameter EMA, and the cosine LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = ["SgdState", "sgd_step", "EmaState", "ema_update", "cosine_lr"]


@dataclass
class SgdState:
    """Momentum-SGD state for one parameter group (one group per layer).

    `lr` is the group's current learning rate; freezing a layer amounts to
    pinning it at 0 and clearing `velocity`.
    """

    lr: float
    momentum: float
    velocity: list[np.ndarray]

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             state: SgdState) -> None:
    """v <- momentum*v + g; p <- p - lr*v, in place.

    lr == 0 leaves every parameter bitwise unchanged (the update is skipped
    entirely rather than subtracting lr*v, so not even a -0.0 can flip).
    """
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ValueError("params/grads/velocity length mismatch")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError("sgd_step shape mismatch")
        v *= state.momentum
        v += g
        if state.lr != 0.0:
            p -= state.lr * v


@dataclass
class EmaState:
    """Exponential moving average of named parameters.

    Shadows are initialized to the parameter values at creation time and
    follow shadow <- decay*shadow + (1 - decay)*param.
    """

    decay: float
    shadow: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must be in (0, 1)")

    @classmethod
    def from_params(cls, decay: float, params: Mapping[str, np.ndarray]) -> "EmaState":
        return cls(decay=decay, shadow={k: v.copy() for k, v in params.items()})


def ema_update(state: EmaState, params: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        s = state.shadow[name]
        s *= state.decay
        s += (1.0 - state.decay) * p


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup 0 -> base_lr, then half-cosine decay base_lr -> 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be < total_steps")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * t))

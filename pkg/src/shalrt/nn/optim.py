"""Adam and AdamW over named parameters."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ..errors import ConfigError, TrainingError
from .modules import Parameter


@dataclass
class OptimizerState:
    kind: str = "adamw"
    learning_rate: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


def optimizer_step(params: Iterable[tuple[str, Parameter]], state: OptimizerState,
                   max_grad_norm: float = 0.0) -> OptimizerState:
    """Apply one Adam(W) update in place and return ``state``.

    AdamW shrinks each parameter by ``lr * weight_decay * theta`` before the
    moment update is applied; plain Adam applies no decay at all.
    """
    params = list(params)
    for name, p in params:
        if p.grad is None:
            raise TrainingError(f"parameter {name!r} has no gradient")
    if max_grad_norm > 0:
        total = np.sqrt(sum(float((p.grad * p.grad).sum()) for _, p in params))
        if total > max_grad_norm:
            for _, p in params:
                p.grad = p.grad * (max_grad_norm / total)

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.betas
    lr = state.learning_rate
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, p in params:
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.second_moment[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        if state.kind == "adamw" and state.weight_decay:
            p.data = p.data - lr * state.weight_decay * p.data
        p.data = p.data - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return state

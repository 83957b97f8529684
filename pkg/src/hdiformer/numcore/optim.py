"""AdamW over a named parameter store."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import StateError
from .tensor import Tensor


@dataclass
class ParamStore:
    """Named parameters plus AdamW moment estimates and the step counter."""

    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    @classmethod
    def from_module(cls, module) -> "ParamStore":
        return cls(dict(module.named_parameters()))

    def trainable(self) -> dict:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def adamw_step(store: ParamStore, lr: float = 1e-4, wd: float = 0.05,
               betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> ParamStore:
    """One decoupled-weight-decay Adam update, in place.

    Decay is applied first (``p -= lr*wd*p``), then the bias-corrected
    moment step. Frozen parameters (``requires_grad`` False) are skipped.
    """
    trainable = store.trainable()
    missing = [k for k, p in trainable.items() if p.grad is None]
    if missing:
        raise StateError(f"adamw_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name, p in trainable.items():
        g = p.grad
        if wd:
            p.data -= lr * wd * p.data
        m, v = store.m[name], store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return store


def step_lr(base_lr: float, step: int, milestones=(), gamma: float = 0.1) -> float:
    """Piecewise-constant schedule: multiply by ``gamma`` at each milestone passed."""
    return base_lr * gamma ** sum(step >= m for m in milestones)


__all__ = ["ParamStore", "adamw_step", "step_lr", "Tensor"]

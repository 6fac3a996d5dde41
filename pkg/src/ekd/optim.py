"""Adam with decoupled weight decay and the inverse-sqrt warmup schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor

__all__ = ["AdamHyper", "AdamState", "lr_at", "adam_step"]


@dataclass(frozen=True)
class AdamHyper:
    base_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 1e-4
    warmup: int = 4000

    def to_dict(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "warmup": self.warmup,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdamHyper":
        return cls(
            base_lr=float(d["base_lr"]),
            beta1=float(d["beta1"]),
            beta2=float(d["beta2"]),
            eps=float(d["eps"]),
            weight_decay=float(d["weight_decay"]),
            warmup=int(d["warmup"]),
        )


@dataclass
class AdamState:
    """First and second moment estimates plus the shared step counter."""

    hyper: AdamHyper = field(default_factory=AdamHyper)
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at(step: int, base_lr: float = 5e-4, warmup: int = 4000) -> float:
    """Linear warmup to ``base_lr`` at ``warmup`` steps, then inverse sqrt.

    The two branches agree at the boundary: ``lr_at(warmup) == base_lr``.
    """
    if step <= 0:
        raise ContractError(f"lr_at needs a positive step, got {step}")
    if warmup < 1:
        raise ContractError(f"warmup must be at least 1, got {warmup}")
    if step <= warmup:
        return base_lr * step / warmup
    return base_lr * math.sqrt(warmup / step)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> float:
    """One in-place Adam update over every parameter; returns the step's lr.

    With ``t`` the new step count, per parameter:

        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        update = (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
        p -= lr_t * (update + weight_decay * p)

    Weight decay multiplies the pre-update parameter (decoupled decay, not
    an L2 term folded into the gradient).  Math runs in each parameter's
    own dtype, so a float64 parameter gets a float64 update.
    """
    h = state.hyper
    t = state.step + 1
    lr = lr_at(t, h.base_lr, h.warmup)
    bc1 = 1.0 - h.beta1 ** t
    bc2 = 1.0 - h.beta2 ** t
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + h.eps)
        if h.weight_decay != 0.0:
            update = update + h.weight_decay * p.data
        p.data -= np.asarray(lr, dtype=p.data.dtype) * update.astype(p.data.dtype, copy=False)
    state.step = t
    return lr

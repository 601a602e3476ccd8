"""Decoupled-weight-decay Adam and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .tensor import Tensor


@dataclass
class AdamWState:
    """First/second moment accumulators plus the bias-correction step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_init(params: dict[str, Tensor]) -> AdamWState:
    state = AdamWState()
    for name, p in params.items():
        if p.requires_grad:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray] | None,
               state: AdamWState, lr: float, weight_decay: float = 0.04,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One AdamW update in place. ``grads=None`` reads each param's .grad."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        if name not in state.m:
            continue
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValidationError(f"gradient shape {g.shape} != param shape "
                                  f"{p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= lr * update + lr * weight_decay * p.data


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def cosine_lr(step: int, total: int, lr0: float = 1e-4, lr_final: float = 1e-6) -> float:
    """Cosine interpolation from lr0 at step 0 to lr_final at step=total."""
    if step < 0:
        raise ValidationError(f"negative step {step}")
    if step >= total:
        return lr_final
    frac = step / total
    return lr_final + 0.5 * (lr0 - lr_final) * (1.0 + math.cos(math.pi * frac))

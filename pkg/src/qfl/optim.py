"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: OptimizerState,
               lr: float, betas=(0.9, 0.999), weight_decay: float = 0.01, eps: float = 1e-8):
    """One bias-corrected AdamW update.

    Returns a new parameter dict; names with a ``None`` gradient (or absent
    from ``grads``) are passed through untouched. ``state`` is updated in place
    and returned.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    out = dict(params)
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        decayed = p * (1 - lr * weight_decay) if weight_decay else p
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        out[name] = (decayed - update).astype(p.dtype)
    return out, state


def lr_at(step: int, warmup_steps: int, total_steps: int, peak_lr: float) -> float:
    """Linear ramp from 0 to ``peak_lr`` over warmup, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return peak_lr
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: dict[str, np.ndarray | None], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return total

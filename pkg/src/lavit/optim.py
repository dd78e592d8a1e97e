"""AdamW with decoupled weight decay, cosine schedule with linear warmup."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float | None = None,
               decay: dict[str, bool] | None = None) -> dict[str, np.ndarray]:
    """One AdamW update; returns new parameter arrays and advances ``state``.

    ``θ ← θ - lr·(m̂/(√v̂ + eps) + wd·θ)``. ``decay`` optionally switches weight
    decay off per parameter name.
    """
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        wd = state.weight_decay if decay is None or decay.get(name, True) else 0.0
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + wd * theta
        out[name] = theta - lr * update
    return out


def cosine_lr(step: int, total_steps: int, warmup_steps: int, lr_max: float,
              lr_min: float = 0.0) -> float:
    """Linear warmup from 0 to ``lr_max``, then cosine decay to ``lr_min``."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * step / warmup_steps
    if total_steps <= warmup_steps:
        return lr_max
    t = min(max((step - warmup_steps) / (total_steps - warmup_steps), 0.0), 1.0)
    return lr_min + (lr_max - lr_min) * (1.0 + math.cos(math.pi * t)) / 2.0


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm

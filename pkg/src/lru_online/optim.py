"""AdamW with linear warmup + one-cycle cosine decay.

Parameters ending in ``nu_log``, ``theta_log`` or ``gamma_log`` form the
recurrent group: their learning rate is scaled by ``lr_factor_recurrent`` and
they are never weight-decayed.
"""
import math
from dataclasses import dataclass, field

import numpy as np

RECURRENT_GROUP = ("nu_log", "theta_log", "gamma_log")


@dataclass
class OptimConfig:
    base_lr: float = 1e-3
    lr_factor_recurrent: float = 0.5
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if not 0.0 <= self.lr_factor_recurrent <= 1.0:
            raise ValueError("lr_factor_recurrent must be in [0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


@dataclass
class OptState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def is_recurrent(name):
    return name.rsplit(".", 1)[-1] in RECURRENT_GROUP


def lr_at(cfg, step):
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    decay_steps = cfg.total_steps - cfg.warmup_steps
    if decay_steps == 0:
        return 0.0
    frac = (step - cfg.warmup_steps) / decay_steps
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def adamw_step(params, grads, state, cfg, step):
    """Update ``params`` (name -> array, modified in place) with one AdamW step."""
    lr = lr_at(cfg, step)
    beta1, beta2 = cfg.betas
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if is_recurrent(name):
            group_lr, wd = lr * cfg.lr_factor_recurrent, 0.0
        else:
            group_lr, wd = lr, cfg.weight_decay
        if wd:
            p *= 1.0 - group_lr * wd
        p -= group_lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return params, state
